import sys
from pathlib import Path

# allow running the suite from a clean checkout: make the package under
# src/ and the tests' oracles module importable regardless of install state
_here = Path(__file__).parent
sys.path.insert(0, str(_here))
_src = _here.parent / "src"
if str(_src) not in sys.path:
    sys.path.insert(0, str(_src))
