"""
Тестовый пакет Diverse Self-Talk
"""
