import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piptrack import cli
from piptrack import model as model_mod
from piptrack.config import ModelConfig, TrainConfig
from piptrack.data import io
from piptrack.model import PIPs
from piptrack.train import save_checkpoint

TINY = ModelConfig(C=8, K=2, L=2, radius=2, mixer_depth=1, mixer_hidden=16, enc_freqs=4, encoder_widths=(8, 8, 8))
SMALL_DATA = {"scene": {"height": 32, "width": 48}, "augment": None, "occluders": 1}


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def tiny_weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "tiny.pipw"
    save_checkpoint(path, PIPs(TINY, seed=0), TINY, TrainConfig(), 0)
    return path


def _frames_dir(tmp_path, S=8, H=32, W=48, seed=0):
    d = tmp_path / "frames"
    d.mkdir()
    rng = np.random.default_rng(seed)
    for t in range(S):
        io.write_ppm(d / f"frame_{t:03d}.ppm", rng.random((3, H, W)))
    return d


# -- generate -------------------------------------------------------------------------


def test_generate_one_sequence_layout(tmp_path, capsys):
    code, _, _ = run(["generate", "--seed", 3, "--out", tmp_path / "ds", "--count", 1], capsys)
    assert code == 0
    seq = tmp_path / "ds" / "seq_0000"
    names = sorted(p.name for p in seq.iterdir())
    assert [n for n in names if n.endswith(".ppm")] == [f"frame_{t:03d}.ppm" for t in range(8)]
    assert [n for n in names if n.startswith("flow_fwd")] == [f"flow_fwd_{t:03d}.flo" for t in range(7)]
    assert [n for n in names if n.startswith("flow_bwd")] == [f"flow_bwd_{t:03d}.flo" for t in range(7)]
    assert [n for n in names if n.endswith(".pgm")] == [f"masks_{t:03d}.pgm" for t in range(8)]
    assert "gt.json" in names and "queries.json" in names
    assert len(names) == 8 + 7 + 7 + 8 + 2
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["sequences"] == ["seq_0000"] and manifest["count"] == 1


def test_generate_zero_writes_only_a_manifest(tmp_path, capsys):
    code, _, _ = run(["generate", "--out", tmp_path / "ds", "--count", 0], capsys)
    assert code == 0
    assert [p.name for p in (tmp_path / "ds").iterdir()] == ["manifest.json"]


def test_generate_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["generate", "--seed", 11, "--out", tmp_path / name], capsys)[0] == 0
    a = (tmp_path / "a" / "seq_0000" / "gt.json").read_bytes()
    assert a == (tmp_path / "b" / "seq_0000" / "gt.json").read_bytes()
    run(["generate", "--seed", 12, "--out", tmp_path / "c"], capsys)
    assert a != (tmp_path / "c" / "seq_0000" / "gt.json").read_bytes()


def test_generate_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"scene": {"hight": 40}}))
    code, _, err = run(["generate", "--config", cfg, "--out", tmp_path / "ds"], capsys)
    assert code != 0
    assert err.startswith("error: ") and "hight" in err and err.count("\n") == 1


def test_generate_to_unwritable_location(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run(["generate", "--out", blocker / "ds"], capsys)
    assert code != 0 and err.startswith("error: ")


# -- train ----------------------------------------------------------------------------


def _train_config(tmp_path, steps=4, **train):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"model": json.loads(json.dumps(TINY.__dict__)),
                               "train": {"steps": steps, "batch_size": 1, "n_queries": 4, "checkpoint_every": 2, **train},
                               "data": SMALL_DATA}))
    return cfg


def test_train_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"train": {"lr_peak": 1e-3}}))
    code, _, err = run(["train", "--config", cfg, "--out", tmp_path / "run"], capsys)
    assert code != 0 and "lr_peak" in err and err.startswith("error: ")


def test_train_missing_dataset(tmp_path, capsys):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"data": {"dataset": str(tmp_path / "absent")}}))
    code, _, err = run(["train", "--config", cfg, "--out", tmp_path / "run"], capsys)
    assert code != 0 and "dataset" in err


def test_train_resume_continues_the_lr_curve(tmp_path, capsys):
    cfg = _train_config(tmp_path)
    assert run(["train", "--config", cfg, "--out", tmp_path / "whole"], capsys)[0] == 0
    assert run(["train", "--config", cfg, "--out", tmp_path / "split", "--until", 2], capsys)[0] == 0
    assert not (tmp_path / "split" / "weights.pipw").exists()
    assert run(["train", "--resume", tmp_path / "split" / "ckpt_000002.pipw", "--out", tmp_path / "split"], capsys)[0] == 0

    def lrs(d):
        rows = (d / "log.csv").read_text().splitlines()[1:]
        return [r.split(",")[-1] for r in rows]

    assert lrs(tmp_path / "whole") == lrs(tmp_path / "split")
    assert (tmp_path / "whole" / "log.csv").read_text() == (tmp_path / "split" / "log.csv").read_text()
    assert (tmp_path / "whole" / "weights.pipw").read_bytes() == (tmp_path / "split" / "weights.pipw").read_bytes()


def test_train_on_a_generated_dataset(tmp_path, capsys):
    gen = tmp_path / "gen.json"
    gen.write_text(json.dumps(SMALL_DATA))
    assert run(["generate", "--config", gen, "--out", tmp_path / "ds", "--count", 2], capsys)[0] == 0
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"model": json.loads(json.dumps(TINY.__dict__)),
                               "train": {"steps": 2, "batch_size": 1, "n_queries": 4},
                               "data": {"dataset": str(tmp_path / "ds"), "augment": None}}))
    assert run(["train", "--config", cfg, "--out", tmp_path / "run"], capsys)[0] == 0
    assert (tmp_path / "run" / "weights.pipw").exists()


# -- track ----------------------------------------------------------------------------


def test_track_one_query_gives_one_record_per_frame(tmp_path, capsys, tiny_weights):
    frames = _frames_dir(tmp_path)
    (tmp_path / "q.json").write_text("[[10.0, 12.0]]")
    code, out, _ = run(["track", "--weights", tiny_weights, "--frames", frames, "--queries", tmp_path / "q.json"], capsys)
    assert code == 0
    recs = [json.loads(line) for line in out.splitlines()]
    assert [(r["q"], r["t"]) for r in recs] == [(0, t) for t in range(8)]
    assert set(recs[0]) == {"q", "t", "x", "y", "v"}
    assert all(np.isfinite([r["x"], r["y"], r["v"]]).all() and 0 <= r["v"] <= 1 for r in recs)


def test_track_orders_by_query_then_time_and_isolates_bad_queries(tmp_path, capsys, tiny_weights):
    frames = _frames_dir(tmp_path)
    (tmp_path / "q.json").write_text("[[5.0, 5.0], [100.0, 5.0], [30.0, 20.0]]")
    out_path = tmp_path / "tracks.jsonl"
    code, _, _ = run(["track", "--weights", tiny_weights, "--frames", frames, "--queries", tmp_path / "q.json",
                      "--out", out_path], capsys)
    assert code == 0
    recs = cli.read_track_records(out_path)
    assert [r["q"] for r in recs] == [0] * 8 + [1] + [2] * 8
    assert "error" in recs[8] and "outside" in recs[8]["error"]
    assert [r["t"] for r in recs if r["q"] == 2] == list(range(8))


def test_track_output_round_trips_byte_identically(tmp_path, capsys, tiny_weights):
    frames = _frames_dir(tmp_path, S=11, H=30, W=45)
    (tmp_path / "q.json").write_text("[[3.3, 4.7], [40.1, 2.0], [-1.0, 0.0]]")
    out_path = tmp_path / "t.jsonl"
    assert run(["track", "--weights", tiny_weights, "--frames", frames, "--queries", tmp_path / "q.json",
                "--out", out_path, "--stride", 4, "--window", 8], capsys)[0] == 0
    text = out_path.read_text()
    again = "".join(cli.canonical_track_line(r) + "\n" for r in cli.read_track_records(out_path))
    assert again == text


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**4),
       *[st.floats(allow_nan=False, allow_infinity=False, width=32) for _ in range(3)])
def test_canonical_track_line_is_a_fixed_point(q, t, x, y, v):
    line = cli.canonical_track_line({"q": q, "t": t, "x": x, "y": y, "v": v})
    assert cli.canonical_track_line(json.loads(line)) == line


def test_track_window_must_match_the_model(tmp_path, capsys, tiny_weights):
    frames = _frames_dir(tmp_path)
    (tmp_path / "q.json").write_text("[[5.0, 5.0]]")
    code, _, err = run(["track", "--weights", tiny_weights, "--frames", frames, "--queries", tmp_path / "q.json",
                        "--window", 6], capsys)
    assert code != 0 and "window" in err


def test_track_rejects_bad_frame_directories(tmp_path, capsys, tiny_weights):
    d = tmp_path / "gap"
    d.mkdir()
    for t in (0, 1, 3):
        io.write_ppm(d / f"f_{t:02d}.ppm", np.zeros((3, 16, 16)))
    (tmp_path / "q.json").write_text("[[5.0, 5.0]]")
    code, _, err = run(["track", "--weights", tiny_weights, "--frames", d, "--queries", tmp_path / "q.json"], capsys)
    assert code != 0 and "contiguous" in err


def test_sixteen_frames_with_always_visible_model_uses_two_windows(tmp_path, capsys, tiny_weights, monkeypatch):
    """Mocked always-visible windows on a 16-frame video: two windows, the second starting at frame 7."""
    def always_visible(model, feats, f1, stride, hw):
        T = model.cfg.T

        def window(t0, ids, xy):
            return np.repeat(xy[:, None], T, axis=1), np.ones((len(ids), T))
        return window

    seen = []
    real = cli.track_video

    def spy(*a, **k):
        res = real(*a, **k)
        seen.append(res.starts)
        return res

    monkeypatch.setattr(model_mod, "model_window_fn", always_visible)
    monkeypatch.setattr(cli, "track_video", spy)
    frames = _frames_dir(tmp_path, S=16)
    (tmp_path / "q.json").write_text("[[5.0, 5.0]]")
    code, out, _ = run(["track", "--weights", tiny_weights, "--frames", frames, "--queries", tmp_path / "q.json"], capsys)
    assert code == 0
    assert len(out.splitlines()) == 16
    assert seen == [[[0, 7]]]


# -- eval -----------------------------------------------------------------------------


def _write_tracks(path, pred):
    lines = [cli.canonical_track_line({"q": q, "t": t, "x": p[0], "y": p[1], "v": 1.0})
             for q, tr in enumerate(pred) for t, p in enumerate(tr)]
    path.write_text("".join(line + "\n" for line in lines))


def test_eval_three_four_five_through_files(tmp_path, capsys):
    gt = np.round(np.random.default_rng(0).uniform(0, 40, (3, 8, 2)), 2).astype(np.float32)
    (tmp_path / "gt.json").write_text(io.gt_to_json(gt, np.ones((3, 8))))
    _write_tracks(tmp_path / "p.jsonl", gt + np.float32([3.0, 4.0]))
    code, out, _ = run(["eval", "--pred", tmp_path / "p.jsonl", "--gt", tmp_path / "gt.json"], capsys)
    assert code == 0
    assert json.loads(out)["ate_visible"] == pytest.approx(5.0, abs=1e-5)


def test_eval_identical_prediction(tmp_path, capsys):
    gt = np.random.default_rng(1).uniform(0, 40, (2, 8, 2)).astype(np.float32)
    vis = np.array([[1] * 8, [0] * 8])
    (tmp_path / "gt.json").write_text(io.gt_to_json(gt, vis))
    _write_tracks(tmp_path / "p.jsonl", gt)
    code, out, _ = run(["eval", "--pred", tmp_path / "p.jsonl", "--gt", tmp_path / "gt.json", "--out",
                        tmp_path / "m.json"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "m.json").read_text())
    assert rep["ate_visible"] == 0 and rep["ate_occluded"] == 0


def test_eval_pck_mode_reports_a_fraction(tmp_path, capsys):
    gt = np.random.default_rng(2).uniform(0, 40, (2, 8, 2)).astype(np.float32)
    (tmp_path / "gt.json").write_text(io.gt_to_json(gt, np.ones((2, 8)), {"area": [100.0] * 8}))
    _write_tracks(tmp_path / "p.jsonl", gt + np.float32([1.5, 0.0]))
    code, out, _ = run(["eval", "--mode", "pck", "--pred", tmp_path / "p.jsonl", "--gt", tmp_path / "gt.json"], capsys)
    assert code == 0
    pck = json.loads(out)["pck_per_video"]
    assert len(pck) == 1 and 0.0 <= pck[0] <= 1.0 and pck[0] == 1.0


def test_eval_lists_missing_ids(tmp_path, capsys):
    gt = np.zeros((3, 8, 2), np.float32)
    (tmp_path / "gt.json").write_text(io.gt_to_json(gt, np.ones((3, 8))))
    _write_tracks(tmp_path / "p.jsonl", gt[[0]])
    code, _, err = run(["eval", "--pred", tmp_path / "p.jsonl", "--gt", tmp_path / "gt.json"], capsys)
    assert code != 0 and err.startswith("error: ") and "[1, 2]" in err


def test_eval_writes_an_overlay(tmp_path, capsys):
    frames = _frames_dir(tmp_path)
    gt = np.random.default_rng(3).uniform(2, 30, (2, 8, 2)).astype(np.float32)
    (tmp_path / "gt.json").write_text(io.gt_to_json(gt, np.ones((2, 8))))
    _write_tracks(tmp_path / "p.jsonl", gt + 1)
    code, _, _ = run(["eval", "--pred", tmp_path / "p.jsonl", "--gt", tmp_path / "gt.json",
                      "--overlay", tmp_path / "ov.ppm", "--frames", frames], capsys)
    assert code == 0
    assert io.read_ppm(tmp_path / "ov.ppm").shape == (3, 32, 48)


# -- process-level contract -----------------------------------------------------------------


def test_console_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "piptrack.cli", "generate", "--out", str(tmp_path / "d"), "--count", "0"],
                        capture_output=True, text=True)
    assert ok.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "piptrack.cli", "frobnicate"], capture_output=True, text=True)
    assert bad.returncode != 0
    assert bad.stderr.startswith("error: ") and bad.stderr.count("\n") == 1
