"""Tests for ceharq."""
