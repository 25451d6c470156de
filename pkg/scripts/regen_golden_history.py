"""Rewrite tests/data/golden_history.json from the scripted mock loop.

Run only after an intentional change to the loop or to training numerics:
    python3 scripts/regen_golden_history.py
"""

import shutil
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from loop_fixtures import GOLDEN_HISTORY, TASK, scripted_config  # noqa: E402

from metagent.controller import forward_train  # noqa: E402

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "history.json"
    forward_train(TASK, scripted_config(path))
    shutil.copyfile(path, GOLDEN_HISTORY)
print(GOLDEN_HISTORY.read_text())
