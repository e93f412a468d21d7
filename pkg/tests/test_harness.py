import math
import os
from dataclasses import replace

import numpy as np
import pytest

from commentaries.commentary import Augmentation, AttentionMask, AuxTarget, ExampleWeight, FreeParameters
from commentaries.harness import cli
from commentaries.harness.analysis import UnsupportedFamilyError, analyze_mask, report_analysis
from commentaries.harness.artifact import (
    ArtifactError,
    ArtifactIncompatibleError,
    ArtifactVersionError,
    CommentaryArtifact,
    dumps,
    load_artifact,
    loads,
    params_digest,
    save_artifact,
)
from commentaries.harness.config import ConfigError, ExperimentConfig, load_config, parse_config
from commentaries.harness.runner import build_dataset, run_eval, run_meta
from commentaries.metrics import MetricsLog
from commentaries.params import ParamVector

QUADRATIC = """
# smoke test
dataset.kind = quadratic
dataset.target = 5.0
commentary.family = free
meta.steps = 200
inner.steps = 1
inner.optimizer = sgd
inner.lr = 1.0
outer.lr = 0.1
outer.beta1 = 0.1
"""

SMALL_ROTATED = """
dataset.kind = rotated
dataset.train = 60
dataset.validation = 20
dataset.test = 20
dataset.image_side = 8
commentary.family = example_weight
commentary.hidden = 4
student.hidden = 6
meta.steps = 2
inner.steps = 5
inner.batch_size = 5
inner.lr = 0.01
outer.lr = 0.01
seeds.eval = 0,1,2
eval.steps = 10
eval.log_every = 5
"""


# --- config -----------------------------------------------------------------

def test_defaults_and_derived_values():
    cfg = parse_config("")
    assert cfg.inner.steps == 200
    assert cfg.eval.log_every == 25
    assert cfg.neumann.terms == 1
    assert cfg.neumann_alpha == cfg.inner.lr
    assert cfg.val_batch_size == cfg.inner.batch_size
    assert cfg.seeds.eval == (0, 1, 2)


def test_parse_values_and_comments():
    cfg = parse_config("inner.lr = 0.5  # trailing comment\nseeds.eval = 4, 5\noutput.reproducible = false\n")
    assert cfg.inner.lr == 0.5
    assert cfg.seeds.eval == (4, 5)
    assert cfg.output.reproducible is False


@pytest.mark.parametrize(
    "text",
    [
        "inner.steps = 0",
        "inner.stepz = 3",
        "bogus.key = 1",
        "steps = 3",
        "inner.steps 3",
        "inner.lr = fast",
        "inner.lr = 0.1\ninner.lr = 0.2",
        "meta.algorithm = evolution",
        "meta.steps = 0",
        "outer.beta1 = 1.0",
        "dataset.kind = quadratic",  # needs the free family
        "commentary.family = free",  # needs the quadratic dataset
        "output.reproducible = maybe",
        "neumann.terms = -1",
        "seeds.eval = ",
        "dataset.jitter = -1",
    ],
)
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_text_round_trip():
    cfg = parse_config(SMALL_ROTATED)
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert again.hash() == cfg.hash()


def test_hash_ignores_output_section():
    a = parse_config(SMALL_ROTATED)
    b = a.override(output__dir="elsewhere")
    c = a.override(inner__lr=0.02)
    assert a.hash() == b.hash() != c.hash()


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_shipped_configs_parse():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    names = sorted(n for n in os.listdir(root) if n.endswith(".cfg"))
    assert names
    for name in names:
        assert isinstance(load_config(os.path.join(root, name)), ExperimentConfig)


# --- artifact ---------------------------------------------------------------

def _artifacts():
    ew = ExampleWeight.create(6, 3, seed=1)
    return [
        CommentaryArtifact(ew, "abc", 3, extra={"horizon": 10}),
        CommentaryArtifact(replace(ew, constant=1.0)),
        CommentaryArtifact(Augmentation.identity(3)),
        CommentaryArtifact(Augmentation(ParamVector.from_arrays(["grid"], [np.array([[0.1, -1e-300], [np.pi, 2.0]])]))),
        CommentaryArtifact(AttentionMask.create(4, 4, 2, sigma=1.5, hidden=3, grid=(2, 2), seed=2)),
        CommentaryArtifact(AttentionMask.create(4, 4, 1, hidden=3, grid=(2, 2)).identity()),
        CommentaryArtifact(AuxTarget.create(5, 2, hidden=3, aux_weight=0.25, seed=4)),
        CommentaryArtifact(FreeParameters.create([1.0 / 3.0])),
    ]


@pytest.mark.parametrize("index", range(8))
def test_artifact_round_trip_is_byte_identical(index, tmp_path):
    art = _artifacts()[index]
    path = save_artifact(art, tmp_path / "a.txt")
    loaded = load_artifact(path)
    assert dumps(loaded) == path.read_text()
    assert params_digest(loaded.commentary.params) == params_digest(art.commentary.params)
    assert loaded.commentary.family == art.commentary.family
    assert loaded.extra == {k: str(v) for k, v in art.extra.items()}


def test_artifact_header_and_layout():
    text = dumps(_artifacts()[2])
    lines = text.splitlines()
    assert lines[0] == "COMMENTARY v1"
    assert "family = augmentation" in lines
    assert "[tensor grid 3x3]" in lines
    assert lines[-1] == "-inf -inf -inf"


def test_artifact_version_mismatch_is_hard_error():
    text = dumps(_artifacts()[0]).replace("COMMENTARY v1", "COMMENTARY v2", 1)
    with pytest.raises(ArtifactVersionError):
        loads(text)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda t: "hello\n" + t,
        lambda t: t.replace("family = free", "family = telepathy"),
        lambda t: t.rsplit("\n", 2)[0] + "\n",
        lambda t: t.replace("meta_seed = 0\n", ""),
        lambda t: t.replace("0.3333333333333333", "zero"),
    ],
)
def test_corrupt_artifacts_rejected(mutate):
    text = dumps(_artifacts()[7])
    with pytest.raises(ArtifactError):
        loads(mutate(text))


# --- runner -----------------------------------------------------------------

def test_quadratic_smoke_run(tmp_path):
    res = run_meta(parse_config(QUADRATIC), tmp_path)
    phi = res.artifact.commentary.params.flatten()[0]
    assert abs(phi - 5.0) < 1e-2
    assert (tmp_path / "commentary.txt").exists() and (tmp_path / "meta_metrics.csv").exists()
    assert len(MetricsLog.read_csv(tmp_path / "meta_metrics.csv")) == 200


def test_rerun_is_byte_identical(tmp_path):
    cfg = parse_config(SMALL_ROTATED)
    run_meta(cfg, tmp_path / "a")
    run_meta(cfg, tmp_path / "b")
    for name in ("commentary.txt", "meta_metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ift_run(tmp_path):
    cfg = parse_config(SMALL_ROTATED + "meta.algorithm = ift\nneumann.terms = 3\ninner.steps_per_outer = 2\n")
    res = run_meta(cfg, tmp_path)
    assert [r.step for r in res.metrics.rows] == [1, 2]


def test_zero_steps_rejected_before_compute(tmp_path):
    with pytest.raises(ConfigError):
        run_meta(parse_config(SMALL_ROTATED.replace("inner.steps = 5", "inner.steps = 0")),
                 tmp_path)
    assert not any(tmp_path.iterdir())


def test_eval_runs_longer_than_horizon_with_baseline(tmp_path):
    cfg = parse_config(SMALL_ROTATED)
    art = run_meta(cfg, tmp_path).artifact
    assert cfg.eval.steps > cfg.inner.steps
    before = art.phi_digest()
    log = run_eval(art, cfg, tmp_path)
    assert art.phi_digest() == before
    assert log.phases() == ["commentary", "baseline"]
    for phase in ("commentary", "baseline"):
        for seed in (0, 1, 2):
            assert [r.step for r in log.select(phase, seed)] == [5, 10]
    assert (tmp_path / "eval_metrics.csv").exists()


def test_identity_artifact_matches_baseline_exactly(tmp_path):
    cfg = parse_config(SMALL_ROTATED)
    ds = build_dataset(cfg)
    art = CommentaryArtifact(ExampleWeight.identity(ds.feature_dim, 4), extra={"horizon": 5})
    log = run_eval(art, cfg, write=False)
    a = [(r.train_loss, r.val_loss, r.test_acc) for r in log.select("commentary")]
    b = [(r.train_loss, r.val_loss, r.test_acc) for r in log.select("baseline")]
    assert a == b


def test_eval_rejects_incompatible_artifact():
    cfg = parse_config(SMALL_ROTATED)
    with pytest.raises(ArtifactIncompatibleError):
        run_eval(CommentaryArtifact(Augmentation.create(2)), cfg, write=False)
    with pytest.raises(ArtifactIncompatibleError):
        run_eval(CommentaryArtifact(ExampleWeight.create(10, 2)), cfg, write=False)


# --- analysis ---------------------------------------------------------------

def test_weight_analysis_schema(tmp_path):
    cfg = parse_config(SMALL_ROTATED)
    art = run_meta(cfg, write=False).artifact
    paths = report_analysis(art, build_dataset(cfg), tmp_path)
    header = (tmp_path / "weights_by_angle.csv").read_text().splitlines()[0]
    assert header == "angle_low,angle_high,iteration,mean_weight,count"
    rho = (tmp_path / "rank_correlation.csv").read_text().splitlines()
    assert rho[0] == "iteration,spearman_abs_angle_weight" and [int(r.split(",")[0]) for r in rho[1:]] == [0, 1, 2, 3, 4, 5]
    assert all(p.exists() for p in paths)


def test_zero_grid_analysis_is_uniform(tmp_path):
    cfg = parse_config(SMALL_ROTATED)
    report_analysis(CommentaryArtifact(Augmentation.create(2)), build_dataset(cfg), tmp_path)
    rows = (tmp_path / "lambda_grid.csv").read_text().splitlines()[1:]
    assert len(rows) == 4 and all(r.endswith(",0.75") for r in rows)


def test_mask_analysis_distances():
    cfg = parse_config("dataset.kind = two_object\ndataset.train = 10\ndataset.validation = 5\n"
                       "dataset.test = 6\ncommentary.family = attention_mask\n")
    ds = build_dataset(cfg)
    com = AttentionMask.create(32, 32, 2, hidden=3, grid=(4, 4), seed=0)
    res = analyze_mask(com, ds)
    test = ds.splits["test"]
    red = np.stack([ds.metadata["red_row"][test], ds.metadata["red_col"][test]], 1)
    np.testing.assert_allclose(res.target_distance, np.linalg.norm(res.centers - red, axis=1))
    assert res.distractor_distance.shape == (6,)
    assert 0.0 <= res.nearer_target_fraction() <= 1.0


def test_aux_target_has_no_analysis(tmp_path):
    cfg = parse_config(SMALL_ROTATED)
    with pytest.raises(UnsupportedFamilyError):
        report_analysis(CommentaryArtifact(AuxTarget.create(64, 2)), build_dataset(cfg), tmp_path)


# --- CLI --------------------------------------------------------------------

def _write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_cli_full_cycle(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUT_DIR_ENV, raising=False)
    cfg = _write(tmp_path, SMALL_ROTATED + f"output.dir = {tmp_path / 'out'}\n")
    assert cli.main(["--quiet", "meta", "--config", cfg]) == 0
    art = tmp_path / "out" / "commentary.txt"
    assert cli.main(["--quiet", "eval", "--artifact", str(art), "--config", cfg]) == 0
    metrics = tmp_path / "out" / "eval_metrics.csv"
    assert cli.main(["--quiet", "--out-dir", str(tmp_path / "x"), "export", "--metrics", str(metrics),
                     "--format", "svg"]) == 0
    assert cli.main(["--quiet", "--out-dir", str(tmp_path / "x"), "export", "--metrics", str(metrics),
                     "--format", "csv"]) == 0
    assert (tmp_path / "x" / "eval_metrics_export.csv").read_text() == metrics.read_text()
    assert cli.main(["--quiet", "analyze", "--artifact", str(art), "--config", cfg]) == 0
    assert (tmp_path / "out" / "rank_correlation.csv").exists()


def test_cli_out_dir_precedence(tmp_path, monkeypatch):
    cfg = _write(tmp_path, QUADRATIC + f"output.dir = {tmp_path / 'cfgdir'}\n")
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(tmp_path / "envdir"))
    assert cli.main(["--quiet", "meta", "--config", cfg]) == 0
    assert (tmp_path / "envdir" / "commentary.txt").exists()
    assert cli.main(["--quiet", "--out-dir", str(tmp_path / "flagdir"), "meta", "--config", cfg]) == 0
    assert (tmp_path / "flagdir" / "commentary.txt").exists()
    assert not (tmp_path / "cfgdir").exists()


def test_cli_seed_override(tmp_path):
    cfg = _write(tmp_path, QUADRATIC)
    assert cli.main(["--quiet", "--seed", "7", "--out-dir", str(tmp_path / "o"), "meta", "--config", cfg]) == 0
    assert "meta_seed = 7" in (tmp_path / "o" / "commentary.txt").read_text()


def test_cli_exit_codes(tmp_path):
    bad = _write(tmp_path, "inner.steps = 0\n", "bad.cfg")
    assert cli.main(["--quiet", "meta", "--config", bad]) == cli.EXIT_CONFIG
    diverge = _write(tmp_path, QUADRATIC.replace("inner.lr = 1.0", "inner.lr = 1e200")
                     .replace("meta.steps = 200", "meta.steps = 5"), "div.cfg")
    out = tmp_path / "div"
    with np.errstate(all="ignore"):
        code = cli.main(["--quiet", "--out-dir", str(out), "meta", "--config", diverge])
    assert code == cli.EXIT_DIVERGED
    empty = tmp_path / "empty.csv"
    empty.write_text("phase,step,seed,train_loss,val_loss,test_acc,wall_time_ms\n")
    assert cli.main(["--quiet", "export", "--metrics", str(empty), "--format", "csv"]) == cli.EXIT_FAIL
    with pytest.raises(SystemExit):
        cli.main(["meta"])
