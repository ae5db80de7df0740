"""Regenerate the trace fixtures shipped inside the package (seed 42)."""
import shutil
from pathlib import Path

from edgeperf.fixtures import write_bimodal_pool, write_synthetic_traces

DATA = Path(__file__).resolve().parents[1] / "src" / "edgeperf" / "data"

for name, writer in (("synthetic-traces", write_synthetic_traces), ("bimodal-rtt-pool", write_bimodal_pool)):
    dest = DATA / name
    shutil.rmtree(dest, ignore_errors=True)
    files = writer(dest, 42)
    print(f"{dest}: {len(files)} trace files")
