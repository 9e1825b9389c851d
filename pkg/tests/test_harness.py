import gzip
from pathlib import Path

import numpy as np
import pytest

from funcnorm import harness as h
from funcnorm.regularizers import RegConfig
from funcnorm.samplers import SamplerSpec

DATA = Path(__file__).resolve().parents[1] / "data" / "mnist5k"

BLOBS = """
data.kind = blobs
data.classes = 4
data.per_class = 60
data.dim = 6
model.hidden = 16
subset_size = 40
trials = 3
optim.steps = 60
optim.eval_every = 20
optim.batch_size = 16
"""


def blobs_cfg(extra="", **changes):
    cfg = h.parse_config(BLOBS + extra)
    return h.with_overrides(cfg, **changes) if changes else cfg


def write_pair(tmp_path, images, labels, gz=False):
    suffix = ".gz" if gz else ""
    ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    h.write_mnist_idx(ip, lp, images, labels)
    return ip, lp


# ---------------------------------------------------------------- IDX

@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip_and_scaling(tmp_path, gz):
    images = np.zeros((3, 2, 2), np.uint8)
    images[0, 0, 0] = 255
    images[1, 1, 1] = 51
    ds = h.load_mnist_idx(*write_pair(tmp_path, images, np.array([0, 9, 4], np.uint8), gz))
    assert ds.images.shape == (3, 4) and len(ds) == 3
    assert ds.images[0, 0] == 1.0 and ds.images[1, 3] == 0.2
    assert ds.labels.tolist() == [0, 9, 4]


def test_idx_header_bytes(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 3, 4), np.uint8), np.zeros(2, np.uint8))
    raw = ip.read_bytes()
    assert raw[:16] == bytes.fromhex("00000803" "00000002" "00000003" "00000004")
    assert lp.read_bytes()[:8] == bytes.fromhex("00000801" "00000002")


def test_idx_bad_magic(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(h.IdxError, match="magic"):
        h.load_mnist_idx(lp, ip)


def test_idx_truncated(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(h.IdxError, match="truncated"):
        h.load_mnist_idx(ip, lp)
    ip.write_bytes(ip.read_bytes()[:6])
    with pytest.raises(h.IdxError, match="truncated header"):
        h.load_mnist_idx(ip, lp)


def test_idx_trailing_bytes(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    lp.write_bytes(lp.read_bytes() + b"\x00")
    with pytest.raises(h.IdxError, match="trailing"):
        h.load_mnist_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, _ = write_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(3, np.uint8))
    (tmp_path / "other").mkdir()
    _, lp = write_pair(tmp_path / "other", np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(h.IdxError, match="mismatch"):
        h.load_mnist_idx(ip, lp)


def test_gzip_writes_are_reproducible(tmp_path):
    images = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    a = write_pair(tmp_path, images, np.zeros(2, np.uint8), gz=True)[0].read_bytes()
    b = write_pair(tmp_path, images, np.zeros(2, np.uint8), gz=True)[0].read_bytes()
    assert a == b and gzip.decompress(a)[:4] == bytes.fromhex("00000803")


def test_bundled_mnist_subset():
    train, test = h.load_mnist_dir(DATA)
    assert train.images.shape == (4000, 784) and len(test) == 1000
    assert set(np.unique(train.labels)) == set(range(10))
    assert 0.0 <= train.images.min() and train.images.max() == 1.0


def test_missing_mnist_dir(tmp_path, monkeypatch):
    monkeypatch.delenv(h.DATA_DIR_ENV, raising=False)
    with pytest.raises(FileNotFoundError):
        h.load_data(h.DataConfig())
    with pytest.raises(FileNotFoundError):
        h.load_mnist_dir(tmp_path)


def test_data_dir_from_environment(monkeypatch):
    monkeypatch.setenv(h.DATA_DIR_ENV, str(DATA))
    train, test = h.load_data(h.DataConfig(test_limit=10))
    assert len(train) == 4000 and len(test) == 10


# ---------------------------------------------------------------- config

def test_config_defaults():
    cfg = h.parse_config("")
    assert cfg.subset_size == 100 and cfg.trials == 10
    assert (cfg.optim.lr, cfg.optim.momentum, cfg.optim.batch_size, cfg.optim.steps, cfg.optim.eval_every) == (
        0.01, 0.9, 32, 5000, 100)
    assert cfg.reg == RegConfig() and cfg.sampler == SamplerSpec()


def test_config_round_trip():
    cfg = blobs_cfg("reg.kind = sobolev\nreg.lambda = 0.25\nsampler.kind = kde\nmodel.batchnorm = yes\n"
                    "output.chance_error = 0.7\n")
    again = h.parse_config(h.format_config(cfg))
    assert again == cfg
    assert h.format_config(again) == h.format_config(cfg)


def test_config_relative_paths(tmp_path):
    (tmp_path / "x.cfg").write_text("data.dir = mnist\noutput.path = out/m.csv\n")
    cfg = h.load_config(tmp_path / "x.cfg")
    assert cfg.data.dir == str(tmp_path / "mnist") and cfg.output == str(tmp_path / "out/m.csv")


@pytest.mark.parametrize("text", [
    "nonsense\n", "foo = 1\n", "seed = 1\nseed = 2\n", "trials = many\n", "model.batchnorm = maybe\n",
    "trials = 0\n", "optim.steps = 0\n", "reg.kind = lasso\n", "sampler.kind = vae\n", "data.kind = cifar\n",
    "optim.momentum = 1.0\n",
])
def test_config_errors(text):
    with pytest.raises(ValueError):
        h.parse_config(text)


def test_comments_ignored():
    assert h.parse_config("# only a comment\nseed = 3  # trailing\n").seed == 3


# ---------------------------------------------------------------- runs

def test_run_is_deterministic(tmp_path):
    cfg = blobs_cfg("reg.kind = weighted_l2\n")
    a, b = h.run_experiment(cfg), h.run_experiment(cfg)
    h.emit_csv(a.log, tmp_path / "a.csv")
    h.emit_csv(b.log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert [r[:7] for r in a.log.rows] == [r[:7] for r in b.log.rows]


def test_lambda_zero_equals_none():
    a = h.run_experiment(blobs_cfg("reg.kind = weighted_l2\nreg.lambda = 0\n"))
    b = h.run_experiment(blobs_cfg("reg.kind = none\n"))
    assert [r[:7] for r in a.log.rows] == [r[:7] for r in b.log.rows]


def test_log_shape_and_monotone_steps():
    res = h.run_experiment(blobs_cfg())
    assert len(res.log.rows) == 3 * 3
    for t in range(3):
        steps = [r.step for r in res.log.trial(t)]
        assert steps == [20, 40, 60]
    assert len(res.trials) == 3 and res.n_diverged == 0


def test_fresh_q_batch_every_step():
    for kind in ("weighted_l2", "sobolev"):
        res = h.run_experiment(blobs_cfg(f"reg.kind = {kind}\n"))
        assert all(t.q_draws == 60 for t in res.trials)
    res = h.run_experiment(blobs_cfg("reg.kind = weight_decay\n"))
    assert all(t.q_draws == 0 for t in res.trials)


def test_pool_disjoint_from_subset():
    cfg = blobs_cfg("reg.kind = weighted_l2\nsampler.kind = pool\nsampler.pool_size = 50\n")
    train, _ = h.load_data(cfg.data, cfg.seed)
    for trial in range(5):
        streams = h.trial_streams(cfg.seed, trial)
        subset = h.draw_subset(len(train), cfg.subset_size, streams["subset"])
        sampler, rows = h.build_sampler(cfg, train, subset, streams["sampler"])
        assert len(rows) == 50 and not set(rows) & set(subset)
        drawn = {r.tobytes() for r in sampler.draw(500, np.random.default_rng(trial))}
        assert not drawn & {r.tobytes() for r in train.images[subset]}


def test_paired_trials_share_subsets_and_init():
    a = h.trial_streams(0, 4)
    b = h.trial_streams(0, 4)
    assert h.draw_subset(100, 10, a["subset"]).tolist() == h.draw_subset(100, 10, b["subset"]).tolist()
    assert h.draw_subset(100, 10, h.trial_streams(0, 5)["subset"]).tolist() != \
        h.draw_subset(100, 10, a["subset"]).tolist()


def test_subset_too_large():
    with pytest.raises(ValueError):
        h.run_experiment(blobs_cfg(subset_size=10_000))


def test_divergence_is_recorded_not_raised():
    cfg = blobs_cfg("optim.lr = 1e6\noptim.momentum = 0.99\n")
    res = h.run_experiment(cfg)
    assert res.n_diverged == 3
    assert all(t.diverged and t.chance_level and t.diverged_step >= 1 for t in res.trials)
    assert res.final_errors().size == 0 and np.all(np.isnan(res.final_errors(include_diverged=True)))


def test_chance_threshold_default():
    res = h.run_experiment(blobs_cfg("output.chance_error = 0.0\n"))
    assert all(t.chance_level for t in res.trials)
    res = h.run_experiment(blobs_cfg())
    assert all(t.chance_level == (t.final_test_error >= 1 - 1.5 / 4) for t in res.trials)


# ---------------------------------------------------------------- CSV

def test_empty_log_header_only(tmp_path):
    h.emit_csv(h.MetricLog(), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join(h.CSV_COLUMNS) + "\n"
    assert h.read_csv(tmp_path / "e.csv").rows == []


def test_csv_round_trip(tmp_path):
    res = h.run_experiment(blobs_cfg("reg.kind = weighted_l2\n"))
    h.emit_csv(res.log, tmp_path / "m.csv")
    back = h.read_csv(tmp_path / "m.csv")
    assert [r[:7] for r in back.rows] == [r[:7] for r in res.log.rows]
    h.emit_csv(res.log, tmp_path / "w.csv", wall_time=True)
    assert h.read_csv(tmp_path / "w.csv").rows == res.log.rows


def test_read_csv_rejects_foreign_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        h.read_csv(tmp_path / "x.csv")


def test_summary_of_constant_columns():
    rows = [h.MetricRow(t, s, 2.5, 2.0, 0.5, 0.1, 0.25, 0.0) for t in range(4) for s in (10, 20)]
    out = h.summarize(h.MetricLog(rows))
    assert out == [(10, 4, 2.5, 0.0, 0.5, 0.0, 0.25, 0.0), (20, 4, 2.5, 0.0, 0.5, 0.0, 0.25, 0.0)]
    assert h.summarize(h.MetricLog(rows), exclude_trials=[0, 1])[0][1] == 2


def test_summary_excludes_diverged(tmp_path):
    rows = [h.MetricRow(0, 10, 1.0, 1.0, 0.0, 0.0, 0.2, 0.0), h.MetricRow(1, 10, 9.0, 9.0, 0.0, 0.0, 0.9, 0.0)]
    result = h.ExperimentResult(h.MetricLog(rows), [h.TrialOutcome(0, False, None, 0.2, False, 0),
                                                    h.TrialOutcome(1, True, 11, float("nan"), True, 0)])
    h.emit_summary(result, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("step,n_trials,train_loss_mean")
    assert lines[1].split(",")[:3] == ["10", "1", "1.0"]
    h.emit_trials(result, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[2] == "1,1,11,nan,1,0"


def test_companion_paths():
    assert h.companion_paths("out/m.csv") == (Path("out/m.summary.csv"), Path("out/m.trials.csv"))
