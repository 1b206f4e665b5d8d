import sys
from pathlib import Path

# let tests import the shared loop oracles as a plain module
sys.path.insert(0, str(Path(__file__).parent))
