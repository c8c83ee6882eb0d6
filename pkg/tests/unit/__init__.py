"""
Юнит-тесты модулей Diverse Self-Talk
"""
