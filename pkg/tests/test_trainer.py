import numpy as np
import pytest

from pintlab.autodiff import SGD, Tensor, backward, load_tensors
from pintlab.data import NoiseSpec, batch_arrays, generate_dataset, generate_shapes
from pintlab.errors import ConfigError, ContractError, DivergenceError
from pintlab.metrics import dice as dice_metric
from pintlab.model import MiniSegNet
from pintlab.noise import cross_entropy_loss, ema_update, make_teacher
from pintlab.rng import BATCH, STUDENT_DROPOUT, stream
from pintlab.trainer import (
    CSV_HEADER,
    MetricsRecord,
    TrainConfig,
    evaluate,
    parse_flat_config,
    train,
)


def _cfg(**kw):
    base = dict(
        strategy="baseline-ce",
        phase1_iters=4,
        phase2_iters=0,
        batch_size=2,
        eval_every=2,
        mc_passes=2,
        widths=(4, 6, 8),
        seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    train_set = generate_dataset(6, 16, 16, 41, NoiseSpec(noise_rate=0.5, seed=41))
    test_set = generate_shapes(3, 16, 16, 42)
    return train_set, test_set


# ---------------------------------------------------------------------------
# config


def test_config_defaults_and_full_scale():
    c = TrainConfig()
    assert (c.strategy, c.phase1_iters, c.phase2_iters) == ("pint", 1500, 500)
    assert (c.lr_phase1, c.lr_decay_every, c.lr_phase2) == (0.01, 625, 0.01)
    assert (c.batch_size, c.ema_decay, c.mc_passes, c.perturb_sigma) == (4, 0.99, 4, 0.1)
    assert (c.eval_every, c.widths, c.dropout_rate) == (100, (8, 16, 32), 0.5)
    full = TrainConfig.full_scale()
    assert (full.phase1_iters, full.phase2_iters, full.lr_decay_every) == (6000, 2000, 2500)


def test_config_text_roundtrip():
    c = _cfg(strategy="pint", phase2_iters=2, teacher_dropout=False, widths=(3, 5, 7))
    back = TrainConfig.from_text(c.to_text())
    assert back == c
    assert back.sha256() == c.sha256()
    other = c.with_overrides(batch_size=3)
    assert other.sha256() != c.sha256()
    assert c.batch_size == 2  # with_overrides copies


def test_parse_flat_config_grammar():
    text = "a = 1\n# full comment\nb = two  # trailing\n\nc=3\n"
    assert parse_flat_config(text) == {"a": "1", "b": "two", "c": "3"}
    with pytest.raises(ConfigError):
        parse_flat_config("a = 1\na = 2\n")
    with pytest.raises(ConfigError):
        parse_flat_config("just words\n")


def test_config_validation():
    bad = [
        dict(strategy="sgd"),
        dict(phase1_iters=-1),
        dict(lr_phase1=0.0),
        dict(lr_decay_every=0),
        dict(batch_size=0),
        dict(momentum=1.0),
        dict(weight_decay=-1e-9),
        dict(ema_decay=0.0),
        dict(mc_passes=0),
        dict(perturb_sigma=-0.1),
        dict(pseudo_mode="argmax"),
        dict(eval_every=0),
        dict(widths=(4, 6)),
        dict(num_classes=1),
        dict(dropout_rate=1.0),
    ]
    for kw in bad:
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"no_such_key": "1"})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"batch_size": "four"})


def test_metrics_record_csv_row_shape():
    assert CSV_HEADER == "iter,phase,loss,mean_u,mean_U,dice,asd,seconds"
    rec = MetricsRecord(7, 1, 0.25, 0.5, 0.5, 0.9, 1.25, 1.23456, 0.01)
    row = rec.csv_row()
    assert row.startswith("7,1,0.25,0.5,0.5,0.9,1.25,")
    assert row.endswith("1.235")  # seconds fixed to millisecond text
    assert len(row.split(",")) == 8  # lr stays out of the file


# ---------------------------------------------------------------------------
# evaluate


class _StubNet:
    """Duck-typed stand-in producing fixed logits for evaluate()."""

    def __init__(self, logits):
        self._logits = np.asarray(logits, dtype=np.float64)

    def forward(self, images, train_mode=False, dropout_rng=None):
        return Tensor(self._logits)


def _logits_for_masks(masks, invert=False):
    m = np.stack([np.asarray(x, dtype=np.float64) for x in masks])
    fg = -m if invert else m
    return np.stack([1.0 - fg * 2.0, fg * 2.0 - 1.0], axis=1)  # argmax == fg


def test_evaluate_perfect_predictor(small_data):
    _, test_set = small_data
    net = _StubNet(_logits_for_masks([s.clean_mask for s in test_set]))
    ev = evaluate(net, test_set)
    assert ev.dice == 1.0 and ev.asd == 0.0 and ev.sentinel_hits == 0


def test_evaluate_constant_background_predictor(small_data):
    _, test_set = small_data
    zeros = [np.zeros((16, 16)) for _ in test_set]
    ev = evaluate(_StubNet(_logits_for_masks(zeros)), test_set)
    assert ev.dice == 0.0
    assert ev.sentinel_hits == len(test_set)
    assert abs(ev.asd - float(np.hypot(16, 16))) < 1e-12
    with pytest.raises(ContractError):
        evaluate(_StubNet(np.zeros((1, 2, 16, 16))), [])


# ---------------------------------------------------------------------------
# the loop, smallest possible runs


def test_zero_iterations_returns_init_unchanged(small_data):
    train_set, _ = small_data
    cfg = _cfg(phase1_iters=0, phase2_iters=0)
    result = train(train_set, None, cfg)
    assert result.records == []
    fresh = MiniSegNet(seed=cfg.seed, widths=cfg.widths, num_classes=2, dropout_rate=0.5)
    for (na, pa), (nb, pb) in zip(
        sorted(result.student.named_parameters().items()),
        sorted(fresh.named_parameters().items()),
    ):
        assert na == nb and np.array_equal(pa.data, pb.data)
    assert result.best_iter == -1


def test_baseline_single_step_matches_manual_replay(small_data):
    train_set, _ = small_data
    cfg = _cfg(phase1_iters=1)
    result = train(train_set, None, cfg)

    # same streams, same order of operations, by hand
    student = MiniSegNet(seed=cfg.seed, widths=cfg.widths, num_classes=2, dropout_rate=0.5)
    teacher = make_teacher(student, decay=cfg.ema_decay)
    optim = SGD(student.parameters(), lr=cfg.lr_phase1, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay)
    idx = stream(cfg.seed, BATCH, 0).choice(len(train_set), size=2, replace=False)
    images, labels = batch_arrays(train_set, idx, use_noisy=True)
    logits = student.forward(images, train_mode=True,
                             dropout_rng=stream(cfg.seed, STUDENT_DROPOUT, 0))
    backward(cross_entropy_loss(logits, labels))
    optim.step()
    ema_update(teacher, student)

    got = result.final_student.named_parameters()
    want = student.named_parameters()
    for name in want:
        assert np.array_equal(got[name].data, want[name].data), name
    got_t = result.teacher.net.named_parameters()
    want_t = teacher.net.named_parameters()
    for name in want_t:
        assert np.array_equal(got_t[name].data, want_t[name].data), name
    assert result.teacher.steps == 1


def test_lr_schedule_steps_down_by_decades(small_data):
    train_set, _ = small_data
    cfg = _cfg(phase1_iters=6, lr_decay_every=2, eval_every=1)
    result = train(train_set, None, cfg)
    lrs = [r.lr for r in result.records]
    assert lrs == [0.01, 0.01, 0.001, 0.001, 0.0001, 0.0001]
    assert [r.iteration for r in result.records] == [1, 2, 3, 4, 5, 6]
    assert all(r.phase == 1 for r in result.records)
    assert all(np.isnan(r.mean_u) for r in result.records)  # ce mode has no teacher pass


def test_int_constant_lr_and_best_selection(small_data):
    train_set, test_set = small_data
    cfg = _cfg(strategy="int", phase1_iters=4, phase2_iters=2, lr_decay_every=2)
    result = train(train_set, test_set, cfg)
    assert [r.lr for r in result.records] == [cfg.lr_phase2] * len(result.records)
    assert all(r.phase == 2 for r in result.records)
    dices = {r.iteration: r.dice for r in result.records}
    assert result.best_dice == max(dices.values())
    assert dices[result.best_iter] == result.best_dice
    assert result.best_dice >= result.records[-1].dice  # never worse than final
    ev = evaluate(result.student, test_set)
    assert abs(ev.dice - result.best_dice) < 1e-12


def test_pint_phase_boundary_is_candidate(tmp_path, small_data):
    train_set, test_set = small_data
    cfg = _cfg(strategy="pint", phase1_iters=3, phase2_iters=3)
    result = train(train_set, test_set, cfg, out_dir=tmp_path / "run")
    by_iter = {r.iteration: r for r in result.records}
    # eval_every=2 plus the boundary at 3 and the final at 6
    assert sorted(by_iter) == [2, 3, 4, 6]
    assert by_iter[3].phase == 1 and by_iter[4].phase == 2
    assert by_iter[3].lr == 0.01 and by_iter[4].lr == cfg.lr_phase2
    # candidates exclude iteration 2 (inside phase 1, not the boundary)
    candidates = {3, 4, 6}
    assert result.best_iter in candidates
    assert result.best_dice == max(by_iter[i].dice for i in candidates)
    assert (tmp_path / "run" / "phase1" / "student.pntw").exists()
    # the phase-1 snapshot holds the boundary-time teacher, reusable downstream
    side = dict(
        line.split(" = ")
        for line in (tmp_path / "run" / "phase1" / "state.txt").read_text().splitlines()
    )
    assert side["next_iter"] == "3"


def test_final_model_is_selected_for_plain_strategies(small_data):
    train_set, test_set = small_data
    for strategy in ("baseline-ce", "pnt"):
        cfg = _cfg(strategy=strategy, phase1_iters=2)
        result = train(train_set, test_set, cfg)
        assert result.student is result.final_student


def test_train_validation(small_data):
    train_set, test_set = small_data
    with pytest.raises(ContractError):
        train([], test_set, _cfg())
    with pytest.raises(ConfigError):
        train(train_set, None, _cfg(strategy="int", phase1_iters=2))
    with pytest.raises(ConfigError):
        train(train_set, None, _cfg(strategy="pint", phase1_iters=2, phase2_iters=2))
    # pint with an empty second phase never needs the test set
    train(train_set, None, _cfg(strategy="pint", phase1_iters=1, phase2_iters=0))
    with pytest.raises(ConfigError):
        train(train_set, test_set, _cfg(), stop_after=0)


def test_divergence_aborts_with_iteration_number(small_data):
    train_set, _ = small_data
    cfg = _cfg(lr_phase1=1e200, phase1_iters=4)
    with np.errstate(all="ignore"):
        with pytest.raises(DivergenceError, match="iteration 2"):
            train(train_set, None, cfg)


def test_init_student_argument_is_copied_not_mutated(small_data):
    train_set, _ = small_data
    donor = MiniSegNet(seed=77, widths=(4, 6, 8), num_classes=2, dropout_rate=0.5)
    before = {n: p.data.copy() for n, p in donor.named_parameters().items()}
    result = train(train_set, None, _cfg(phase1_iters=1), init_student=donor)
    for n, p in donor.named_parameters().items():
        assert np.array_equal(p.data, before[n])
    changed = any(
        not np.array_equal(result.final_student.named_parameters()[n].data, before[n])
        for n in before
    )
    assert changed


# ---------------------------------------------------------------------------
# determinism, logging, resume


def _strip_seconds(csv_text: str) -> str:
    lines = csv_text.strip().splitlines()
    return "\n".join(",".join(line.split(",")[:-1]) for line in lines)


def test_repeat_runs_identical_modulo_seconds(tmp_path, small_data):
    train_set, test_set = small_data
    cfg = _cfg(strategy="pint", phase1_iters=3, phase2_iters=3)
    a = train(train_set, test_set, cfg, out_dir=tmp_path / "a")
    b = train(train_set, test_set, cfg, out_dir=tmp_path / "b")
    csv_a = (tmp_path / "a" / "metrics.csv").read_text()
    csv_b = (tmp_path / "b" / "metrics.csv").read_text()
    assert _strip_seconds(csv_a) == _strip_seconds(csv_b)
    for ra, rb in zip(a.records, b.records):
        assert (ra.loss, ra.dice, ra.asd, ra.mean_u) == (rb.loss, rb.dice, rb.asd, rb.mean_u)
    pa = a.final_student.named_parameters()
    pb = b.final_student.named_parameters()
    assert all(np.array_equal(pa[n].data, pb[n].data) for n in pa)


def test_checkpoint_resume_bit_exact(tmp_path, small_data):
    train_set, test_set = small_data
    cfg = _cfg(strategy="pint", phase1_iters=4, phase2_iters=2)
    solid = train(train_set, test_set, cfg, out_dir=tmp_path / "solid")

    part = train(train_set, test_set, cfg, out_dir=tmp_path / "split", stop_after=3)
    assert part.records[-1].iteration <= 3
    resumed = train(
        train_set, test_set, cfg,
        out_dir=tmp_path / "split",
        resume_from=tmp_path / "split" / "checkpoint",
    )

    ps, pr = solid.final_student.named_parameters(), resumed.final_student.named_parameters()
    assert all(np.array_equal(ps[n].data, pr[n].data) for n in ps)
    ts = solid.teacher.net.named_parameters()
    tr = resumed.teacher.net.named_parameters()
    assert all(np.array_equal(ts[n].data, tr[n].data) for n in ts)
    assert solid.teacher.steps == resumed.teacher.steps
    assert (solid.best_dice, solid.best_iter) == (resumed.best_dice, resumed.best_iter)
    csv_solid = (tmp_path / "solid" / "metrics.csv").read_text()
    csv_split = (tmp_path / "split" / "metrics.csv").read_text()
    assert _strip_seconds(csv_solid) == _strip_seconds(csv_split)


def test_resume_rejects_other_config(tmp_path, small_data):
    train_set, test_set = small_data
    cfg = _cfg(phase1_iters=3)
    train(train_set, test_set, cfg, out_dir=tmp_path / "run", stop_after=2)
    with pytest.raises(ConfigError):
        train(
            train_set, test_set, cfg.with_overrides(batch_size=3),
            out_dir=tmp_path / "run", resume_from=tmp_path / "run" / "checkpoint",
        )


def test_run_directory_layout(tmp_path, small_data):
    train_set, test_set = small_data
    cfg = _cfg(strategy="int", phase1_iters=2, phase2_iters=2)
    train(train_set, test_set, cfg, out_dir=tmp_path / "run")
    run = tmp_path / "run"
    assert (run / "config.txt").read_text() == cfg.to_text()
    lines = (run / "metrics.csv").read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 3  # evals at 2 and 4
    for ck in ("init", "checkpoint", "final", "best"):
        for f in ("student.pntw", "teacher.pntw", "optim.pntw", "state.txt"):
            assert (run / ck / f).exists(), (ck, f)
    side = parse_flat_config((run / "final" / "state.txt").read_text())
    assert side["config_sha256"] == cfg.sha256()
    assert side["next_iter"] == "4"
    # the saved best student reloads to the selected model
    best = load_tensors(run / "best" / "best_student.pntw")
    net = MiniSegNet.from_state(best, dropout_rate=cfg.dropout_rate)
    ev = evaluate(net, test_set)
    assert abs(ev.dice - max(r.dice for r in train(
        train_set, test_set, cfg).records)) < 1e-12


def test_random_init_scores_below_short_training():
    # 32x32 keeps enough foreground for a 200-step run to beat the zero net
    train_set = generate_dataset(8, 32, 32, 51, NoiseSpec(noise_rate=0.25, seed=51))
    test_set = generate_shapes(4, 32, 32, 52)
    cfg = _cfg(phase1_iters=200, eval_every=200, batch_size=4, widths=(8, 16, 32))
    init_net = MiniSegNet(seed=cfg.seed, widths=cfg.widths, num_classes=2, dropout_rate=0.5)
    before = evaluate(init_net, test_set)
    result = train(train_set, test_set, cfg)
    after = evaluate(result.final_student, test_set)
    assert before.dice < 0.7
    assert after.dice > 0.9
    assert after.dice > before.dice + 0.2
