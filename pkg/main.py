import sys
from pathlib import Path

# Add project root to Python path FIRST
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

# Now use absolute imports (no dots)
from cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
