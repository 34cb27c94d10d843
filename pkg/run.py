"""
Launcher script for the pglmm command line from a source checkout.
"""
import sys
from pathlib import Path

# Add project root to path for absolute imports
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from src.main import main

if __name__ == "__main__":
    main()
