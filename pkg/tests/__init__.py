"""Test package initialization."""
from pathlib import Path

# Set up test directory path
TEST_DIR = Path(__file__).parent
