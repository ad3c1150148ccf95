"""
Tests Module
Unit, property and end-to-end tests for the guard, its toy world and the CLI
"""
