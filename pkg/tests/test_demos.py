import runpy
from pathlib import Path

DEMOS = Path(__file__).resolve().parent.parent / "demos"


def test_routing_walkthrough_runs(capsys):
    runpy.run_path(str(DEMOS / "01_routing_walkthrough.py"), run_name="__main__")
    out = capsys.readouterr().out
    assert "absent capsule changes nothing: True" in out
    assert "encoder is per-location (bit-exact): True" in out
