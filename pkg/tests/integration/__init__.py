"""
Интеграционные тесты конвейера Diverse Self-Talk
"""
