"""Test and measurement tools built on the File Operations API."""
