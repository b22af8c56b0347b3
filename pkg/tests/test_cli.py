import json
import subprocess
import sys

import numpy as np
import pytest

from temporal4d import swattn
from temporal4d.cli import DEFAULTS, main
from temporal4d.flowmatch import frame_noise, load_checkpoint, read_loss_csv
from temporal4d.meshio import MeshFrame, MeshSequence, icosphere, load_sequence, save_sequence
from temporal4d.trajectory import (
    TRAJECTORY_SCHEMA,
    CameraParams,
    initial_translation,
    render_sequence,
    write_mask,
)


def _seq(T=3, shift=0.0):
    ico = icosphere(1)
    return MeshSequence([MeshFrame(ico.vertices * (1 + 0.1 * t) + shift, ico.faces) for t in range(T)])


def _tree(d):
    """Relative path -> bytes for every file below ``d`` except the persisted config."""
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "config.json"}


@pytest.fixture
def seq_dirs(tmp_path):
    a, b = tmp_path / "pred", tmp_path / "gt"
    save_sequence(_seq(), a)
    save_sequence(_seq(), b)
    return a, b


@pytest.fixture
def track_fixture(tmp_path):
    F = 3
    ico = icosphere(2)
    mesh = MeshFrame(ico.vertices * [0.4, 0.6, 0.4], ico.faces)
    meshes = MeshSequence([mesh] * F)
    cam = CameraParams.centered(120.0, 64)
    t = np.arange(F)
    true = np.stack([0.2 * np.sin(t), 0.1 * np.cos(t), 4 + 0.2 * np.sin(t)], 1)
    masks = (render_sequence(meshes, true, cam, samples=512) >= 0.5).astype(float)
    save_sequence(meshes, tmp_path / "meshes")
    (tmp_path / "masks").mkdir()
    for i, m in enumerate(masks):
        write_mask(m, tmp_path / "masks" / f"mask_{i:03d}.png")
    return tmp_path / "meshes", tmp_path / "masks", masks, mesh


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    code = main(["demo-train", "--out", str(out), "--steps", "3", "--batch", "4", "--frames", "24",
                 "--clip-len", "12", "--hop", "6", "--gen-frames", "6", "--sample-steps", "2"])
    assert code == 0
    return out


# -- contract ----------------------------------------------------------------------

def test_usage_errors_exit_2(capsys, tmp_path):
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["eval", str(tmp_path)]) == 2
    assert main(["eval", str(tmp_path), str(tmp_path / "missing")]) == 2
    assert "not a directory" in capsys.readouterr().err


def test_runtime_failure_exits_1(tmp_path, capsys):
    save_sequence(_seq(3), tmp_path / "a")
    save_sequence(_seq(4), tmp_path / "b")
    assert main(["eval", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "o")]) == 1
    assert "lengths differ" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "temporal4d", "check", "--only", "metrics.identities"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("PASS metrics.identities")


# -- config precedence -----------------------------------------------------------

def test_config_precedence_and_persistence(seq_dirs, tmp_path):
    a, b = seq_dirs
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"tau": 0.05, "K": 8, "n_points": 128}))
    out = tmp_path / "o"
    assert main(["eval", str(a), str(b), "--config", str(conf), "--K", "4", "--out", str(out)]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["tau"] == 0.05          # from the file
    assert saved["K"] == 4               # flag beats file
    assert saved["eps"] == DEFAULTS["eval"]["eps"]  # default
    assert saved["command"] == "eval"
    report = json.loads((out / "report.json").read_text())
    assert report["params"]["tau"] == 0.05 and report["params"]["K"] == 4


def test_unknown_config_key_is_usage_error(seq_dirs, tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"tua": 0.05}))
    assert main(["eval", *map(str, seq_dirs), "--config", str(conf)]) == 2
    conf.write_text("[1, 2]")
    assert main(["eval", *map(str, seq_dirs), "--config", str(conf)]) == 2


# -- check -----------------------------------------------------------------------

def test_check_passes(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "properties passed" in out


def test_check_catches_rotated_values(monkeypatch, capsys):
    original = swattn._window_attend

    def faulty(Q, K, V, W, cfg, t0=0, heads=1, return_weights=False):
        # mutation: rotate values as well as queries and keys
        V = swattn._rotate_frames(swattn.as_tensor(V), t0 + np.arange(np.shape(V)[-3]), cfg, heads)
        return original(Q, K, V, W, cfg, t0, heads, return_weights)

    monkeypatch.setattr(swattn, "_window_attend", faulty)
    assert main(["check"]) == 1
    out = capsys.readouterr().out
    assert "FAIL swattn.lossless_w0" in out
    assert "failed:" in out and "swattn.lossless_w0" in out.splitlines()[-1]


def test_check_logs_identical_for_same_seed(tmp_path):
    assert main(["check", "--seed", "123", "--out", str(tmp_path / "a")]) == 0
    assert main(["check", "--seed", "123", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "check.log").read_bytes() == (tmp_path / "b" / "check.log").read_bytes()


# -- eval --------------------------------------------------------------------------

def test_eval_identity_prints_table(seq_dirs, tmp_path, capsys):
    a, b = seq_dirs
    assert main(["eval", str(a), str(b), "--n-points", "256", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out.splitlines()
    header = [h.strip() for h in out[0].split("|")]
    assert header == ["CD", "F-score", "Precision", "Recall", "ΔCD", "FE Cos", "Feat. DTW", "Occ. KL"]
    row = [c.strip() for c in out[-2].split("|")]
    assert row[0] == "0.0000" and row[1] == "1.0000"
    assert "tau=0.02" in out[-1] and "K=32" in out[-1]


# -- track -----------------------------------------------------------------------

def test_track_zero_steps_returns_initialisation(track_fixture, tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    meshes, masks, gt, mesh = track_fixture
    out = tmp_path / "t"
    assert main(["track", str(meshes), str(masks), "--steps", "0", "--focal", "120",
                 "--samples", "512", "--out", str(out)]) == 0
    doc = json.loads((out / "trajectory.json").read_text())
    jsonschema.validate(doc, TRAJECTORY_SCHEMA)
    init = initial_translation(mesh, gt[0], CameraParams.centered(120.0, 64))
    for f in doc["frames"]:
        assert [f["tx"], f["ty"], f["tz"]] == init.tolist()
    assert doc["focal"] == 120.0


def test_track_reports_missing_masks(track_fixture, tmp_path, capsys):
    meshes, masks, _, _ = track_fixture
    (masks / "mask_002.png").unlink()
    assert main(["track", str(meshes), str(masks), "--steps", "1", "--out", str(tmp_path / "t")]) == 1
    assert "[2]" in capsys.readouterr().err


# -- demo-train and generate -----------------------------------------------------------

def test_demo_train_outputs(checkpoint):
    assert (checkpoint / "checkpoint.npz").exists()
    assert len(read_loss_csv(checkpoint / "loss.csv")) == 3
    assert len(load_sequence(checkpoint / "generated")) == 6
    saved = json.loads((checkpoint / "config.json").read_text())
    assert saved["clip_len"] == 12 and saved["w_self"] == 2


def test_generate_long_sequence_has_bounded_cache(checkpoint, tmp_path):
    out = tmp_path / "g"
    assert main(["generate", str(checkpoint / "checkpoint.npz"), "-T", "500", "--sample-steps", "1",
                 "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["peak_cached_frames"] == 5 == stats["cache_bound"]
    assert np.load(out / "latents.npy").shape == (500, 16, 32)
    assert len(list((out / "sequence").glob("*.obj"))) == 500


def test_generate_w0_equals_per_frame_sampling(checkpoint, tmp_path):
    from temporal4d.flowmatch import Codec, synth_sequence

    out = tmp_path / "g"
    steps, seed = 3, 5
    assert main(["generate", str(checkpoint / "checkpoint.npz"), "-T", "4", "--W", "0", "--w-cross", "0",
                 "--sample-steps", str(steps), "--seed", str(seed), "--out", str(out)]) == 0
    joint = np.load(out / "latents.npy")
    model = load_checkpoint(checkpoint / "checkpoint.npz")
    _, cond, _ = synth_sequence(DEFAULTS["generate"]["cond_seed"], 4, codec=Codec())
    for t in range(4):
        x = frame_noise(seed, [t], (16, 32))[0]
        for i in range(steps):
            x = x + (1.0 / steps) * model.forward_frame(x, cond[t], i / steps).data
        assert np.abs(joint[t] - x).max() < 1e-10


def test_generate_missing_checkpoint_is_usage_error(tmp_path):
    assert main(["generate", str(tmp_path / "none.npz")]) == 2


def test_generate_version_mismatch(checkpoint, tmp_path, capsys):
    with np.load(checkpoint / "checkpoint.npz") as z:
        arrays = dict(z)
    arrays["__version__"] = np.array(7)
    np.savez(tmp_path / "old.npz", **arrays)
    assert main(["generate", str(tmp_path / "old.npz"), "-T", "2", "--out", str(tmp_path / "g")]) == 1
    err = capsys.readouterr().err
    assert "version 7" in err and "version 1" in err


# -- normalize -----------------------------------------------------------------------

def test_normalize_command(tmp_path):
    save_sequence(_seq(3, shift=4.0), tmp_path / "in")
    assert main(["normalize", str(tmp_path / "in"), "--out", str(tmp_path / "n")]) == 0
    seq = load_sequence(tmp_path / "n")
    assert max(np.abs(f.vertices).max() for f in seq) == pytest.approx(1.0, abs=1e-6)
    assert seq.record is not None


# -- determinism -------------------------------------------------------------------

def test_every_subcommand_is_bit_identical(seq_dirs, track_fixture, checkpoint, tmp_path):
    a, b = seq_dirs
    meshes, masks, _, _ = track_fixture
    ck = str(checkpoint / "checkpoint.npz")
    runs = {
        "check": ["check", "--seed", "7"],
        "eval": ["eval", str(a), str(b), "--n-points", "256"],
        "track": ["track", str(meshes), str(masks), "--steps", "5", "--samples", "256"],
        "demo-train": ["demo-train", "--steps", "2", "--batch", "3", "--frames", "24", "--clip-len", "12",
                       "--hop", "6", "--gen-frames", "4", "--sample-steps", "2"],
        "generate": ["generate", ck, "-T", "12", "--sample-steps", "2", "--seed", "3"],
        "normalize": ["normalize", str(a)],
    }
    for name, argv in runs.items():
        trees = []
        for k in range(2):
            out = tmp_path / f"{name}-{k}"
            assert main(argv + ["--out", str(out)]) == 0, name
            trees.append(_tree(out))
        assert trees[0] and trees[0] == trees[1], name
