#!/usr/bin/env python3
"""
Tests for atomic and staged output
"""

import os

import pytest

from io_utils import atomic_path, atomic_write_text, staged_directory


def test_atomic_write_replaces_whole_file(tmp_path):
    path = tmp_path / "a.txt"
    atomic_write_text(str(path), "one\n")
    atomic_write_text(str(path), "two\n")
    assert path.read_text() == "two\n"
    assert os.listdir(tmp_path) == ["a.txt"]


def test_atomic_path_keeps_old_file_on_failure(tmp_path):
    path = tmp_path / "a.txt"
    path.write_text("old\n")
    with pytest.raises(RuntimeError):
        with atomic_path(str(path)) as tmp:
            with open(tmp, "w") as handle:
                handle.write("half")
            raise RuntimeError("interrupted")
    assert path.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["a.txt"]


def test_staged_directory_commits_every_file(tmp_path):
    out = tmp_path / "run"
    with staged_directory(str(out)) as staging:
        assert not out.exists()
        atomic_write_text(os.path.join(staging, "a.txt"), "a\n")
        atomic_write_text(os.path.join(staging, "b.txt"), "b\n")
    assert sorted(os.listdir(out)) == ["a.txt", "b.txt"]
    assert os.listdir(tmp_path) == ["run"]


def test_staged_directory_discards_on_failure(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "a.txt").write_text("previous\n")
    with pytest.raises(OSError):
        with staged_directory(str(out)) as staging:
            atomic_write_text(os.path.join(staging, "a.txt"), "new\n")
            raise OSError("No space left on device")
    assert os.listdir(out) == ["a.txt"]
    assert (out / "a.txt").read_text() == "previous\n"
    assert os.listdir(tmp_path) == ["run"]
