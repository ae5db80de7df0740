"""Run the aggregator CLI as a child process (for crash and restart tests)."""
from __future__ import annotations

import os
import re
import subprocess
import sys
import time
import urllib.request


class AggregatorProcess:
    def __init__(self, db, token=None):
        args = [sys.executable, "-m", "edgeperf", "aggregate", "--db", str(db), "--port", "0"]
        if token:
            args += ["--token", token]
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        self.proc = subprocess.Popen(args, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, env=env)
        deadline = time.monotonic() + 20
        self.url = None
        while time.monotonic() < deadline:
            line = self.proc.stdout.readline()
            if not line:
                break
            m = re.search(r"listening on (http://\S+)", line)
            if m:
                self.url = m.group(1)
                break
        if self.url is None:
            self.proc.kill()
            raise RuntimeError("aggregator did not start")
        urllib.request.urlopen(self.url + "/v1/health", timeout=5).read()

    def kill(self):
        self.proc.kill()
        self.proc.wait(10)
        self.proc.stdout.close()
