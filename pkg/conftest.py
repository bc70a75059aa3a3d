import os
import subprocess
import sys

import pytest

_ROOT = os.path.dirname(os.path.abspath(__file__))
_TESTS = os.path.join(_ROOT, "tests")


def pytest_collect_file(parent, file_path):
    # tests/*.py are standalone scripts (see tests/testall.sh); run each as one item.
    if file_path.suffix == ".py" and str(file_path.parent) == _TESTS:
        return ScriptFile.from_parent(parent, path=file_path)


class ScriptFile(pytest.File):
    def collect(self):
        yield ScriptItem.from_parent(self, name=self.path.name)


class ScriptItem(pytest.Item):
    def runtest(self):
        env = dict(os.environ, MPLBACKEND="Agg")
        proc = subprocess.run(
            [sys.executable, str(self.path)],
            cwd=_ROOT,
            env=env,
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            raise ScriptFailed(proc)

    def repr_failure(self, excinfo):
        if isinstance(excinfo.value, ScriptFailed):
            p = excinfo.value.proc
            return f"exit status {p.returncode}\n{p.stdout}\n{p.stderr}"
        return super().repr_failure(excinfo)

    def reportinfo(self):
        return self.path, 0, self.name


class ScriptFailed(Exception):
    def __init__(self, proc):
        self.proc = proc
