import runpy
import sys
from pathlib import Path

import pytest

DEMOS = Path(__file__).resolve().parents[1] / "demos"


@pytest.mark.parametrize("name,args", [
    ("schedule_tour.py", []),
    ("calibration.py", ["--n", "40", "--epochs", "1"]),
    ("end_to_end.py", ["--n", "40", "--epochs", "1", "--k", "2"]),
])
def test_demo_runs(name, args, monkeypatch, capsys):
    monkeypatch.setattr(sys, "argv", [name] + args)
    runpy.run_path(str(DEMOS / name), run_name="__main__")
    assert capsys.readouterr().out.strip()
