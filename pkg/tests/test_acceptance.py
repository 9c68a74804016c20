"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are repeated in the pytest terminal summary under "acceptance criteria".
Criteria 4 and 5 share one trained toy teacher; its training time is charged to
criterion 4.
"""
import math
import time

import numpy as np
import pytest

from conftest import Criterion
from sslkd import checkpoint, features
from sslkd.analysis import bench_frontend, cca_similarity
from sslkd.autodiff import Tape, Tensor, backward, grad_check, grad_check_params, ops
from sslkd.config import DEFAULT_TEACHER
from sslkd.data import SyntheticDatasetSpec, make_synthetic_dataset
from sslkd.encoder import Model, ModelConfig, count_params, encode, forward, frontend_forward, table1_config
from sslkd.losses import (
    LayerMap, StudentOutputHead, TeacherOutputHead, discriminative_loss, frontend_loss, hubert_pretrain_loss,
    loss_schedule, regression_loss, student_label_distribution, teacher_label_distribution,
)
from sslkd.train import (
    DistillConfig, TeacherTrainConfig, distill, evaluate_teacher, train_teacher,
)

C = 16
TEACHER_TRAIN = TeacherTrainConfig(steps=2000, batch_size=8, crop_frames=64, lr=3e-3, d_emb=256)
CORPUS_SPEC = SyntheticDatasetSpec(n_utterances=40)


@pytest.fixture(scope="module")
def corpus():
    return make_synthetic_dataset(CORPUS_SPEC, seed=0)


@pytest.fixture(scope="module")
def trained_teacher(corpus):
    t0 = time.perf_counter()
    run = train_teacher(corpus, DEFAULT_TEACHER, TEACHER_TRAIN)
    return run, time.perf_counter() - t0


# ---------------------------------------------------------------- 1

def test_criterion_1_parameter_counts():
    reference = {("snw", "waveform"): 23.64, ("snw", "fbank"): 19.81,
                 ("dnt", "waveform"): 23.08, ("dnt", "fbank"): 19.25}
    with Criterion(1, "parameter counts", budget_s=1.0) as c:
        for (structure, frontend), ref in reference.items():
            n = count_params(table1_config(structure, frontend))
            dev = (n / 1e6 - ref) / ref
            c.note(f"{structure}/{frontend} {n / 1e6:.2f}M ({100 * dev:+.2f}%)")
            assert abs(dev) < 0.02
        wf = sum(int(np.prod(s)) for s in features.waveform_frontend_shapes().values())
        fb = sum(int(np.prod(s)) for s in features.fbank_frontend_shapes().values())
        assert (wf, fb) == (4_200_448, 368_640)
        for structure in ("snw", "dnt"):
            delta = count_params(table1_config(structure, "waveform")) - count_params(table1_config(structure, "fbank"))
            assert delta == wf - fb
            assert abs(delta / 3.83e6 - 1) < 0.01
        c.note(f"delta {(wf - fb) / 1e6:.4f}M")


# ---------------------------------------------------------------- 2

def _primitive_checks(rng):
    """(name, error) for every differentiable primitive."""
    def u(*s):
        return rng.uniform(-2.0, 2.0, size=s)

    def check(fn, x, w):
        return grad_check(lambda v: ops.sum(fn(v) * w), x)

    out = []
    x, w = u(3, 4), u(3, 4)
    for name in ("exp", "sigmoid", "log_sigmoid", "tanh", "gelu", "abs", "square", "neg"):
        out.append((name, check(getattr(ops, name), x, w)))
    pos = rng.uniform(0.3, 2.0, size=(3, 4))
    out.append(("log", check(ops.log, pos, w)))
    out.append(("sqrt", check(ops.sqrt, pos, w)))
    out.append(("clip", check(lambda v: ops.clip(v, -1.0, 1.0), x * 0.45 + 0.05, w)))
    b = rng.uniform(0.5, 2.0, size=(1, 4))
    for name in ("add", "sub", "mul", "div"):
        fn = getattr(ops, name)
        out.append((name, max(check(lambda v: fn(v, Tensor(b)), x, w), check(lambda v: fn(Tensor(x), v), b, w))))
    x3 = u(2, 3, 4)
    cases = {
        "sum": (lambda v: ops.sum(v, axis=1), u(2, 4)),
        "mean": (lambda v: ops.mean(v, axis=2), u(2, 3)),
        "reshape": (lambda v: ops.reshape(v, (4, 6)), u(4, 6)),
        "transpose": (lambda v: ops.transpose(v, (2, 0, 1)), u(4, 2, 3)),
        "swapaxes": (lambda v: ops.swapaxes(v, 0, 2), u(4, 3, 2)),
        "getitem": (lambda v: ops.getitem(v, (slice(None), np.array([0, 2, 2]))), u(2, 3, 4)),
        "concat": (lambda v: ops.concat([v, v * 2.0], axis=1), u(2, 6, 4)),
        "pad_last": (lambda v: ops.pad_last(v, 2, 1), u(2, 3, 7)),
    }
    for name, (fn, wc) in cases.items():
        out.append((name, check(fn, x3, wc)))
    M, W, bias, w5 = u(4, 5), u(5, 4), u(5), u(2, 3, 5)
    out.append(("matmul", max(check(lambda v: ops.matmul(v, Tensor(M)), x3, w5),
                              check(lambda m: ops.matmul(Tensor(x3), m), M, w5))))
    out.append(("linear", max(check(lambda m: ops.linear(Tensor(x3), m, bias), W, w5),
                              check(lambda v: ops.linear(Tensor(x3), W, v), bias, w5),
                              check(lambda v: ops.linear(v, W, bias), x3, w5))))
    out.append(("softmax", check(ops.softmax, x, w)))
    out.append(("log_softmax", check(ops.log_softmax, x, w)))
    x8, g8, b8, w8 = u(3, 8), u(8), u(8), u(3, 8)
    out.append(("layer_norm", max(check(lambda v: ops.layer_norm(v, g8, b8), x8, w8),
                                  check(lambda g: ops.layer_norm(Tensor(x8), g, b8), g8, w8),
                                  check(lambda v: ops.layer_norm(Tensor(x8), g8, v), b8, w8))))
    xg, gg, bg, wg = u(2, 4, 5), u(4), u(4), u(2, 4, 5)
    out.append(("group_norm", max(check(lambda v: ops.group_norm(v, 2, gg, bg), xg, wg),
                                  check(lambda g: ops.group_norm(Tensor(xg), 2, g, bg), gg, wg))))
    out.append(("l2_normalize", check(ops.l2_normalize, x, w)))
    y = u(3, 4)
    out.append(("cosine_similarity", check(lambda v: ops.cosine_similarity(v, Tensor(y)), x, u(3))))
    xc, kc, wc = u(2, 4, 11), u(6, 2, 3), u(2, 6, 5)
    out.append(("conv1d", max(check(lambda v: ops.conv1d(v, Tensor(kc), 2, 2), xc, wc),
                              check(lambda k: ops.conv1d(Tensor(xc), k, 2, 2), kc, wc))))
    return out


def test_criterion_2_gradient_correctness():
    with Criterion(2, "gradient correctness", budget_s=120.0) as c:
        rng = np.random.default_rng(0)
        prim = _primitive_checks(rng)
        worst = max(prim, key=lambda p: p[1])
        c.note(f"{len(prim)} primitives, worst {worst[0]} {worst[1]:.1e}")
        assert all(err < 1e-6 for _, err in prim), [p for p in prim if p[1] >= 1e-6]

        t_cfg = ModelConfig(frontend_kind="waveform", structure="custom", n_layers=2, d_model=8, d_ffn=16,
                            n_heads=2, conv_pos_kernel=4, conv_pos_groups=2, vocab=4, frontend_channels=4)
        s_cfg = t_cfg.replace(structure="dnt", d_model=8, d_ffn=8)
        teacher, student = Model.random(t_cfg, rng), Model.random(s_cfg, rng)
        # larger weights than the 0.02 init so attention is far from uniform and every gradient is non-negligible
        for m in (teacher, student):
            for k, v in m.params.items():
                if v.ndim == 2 and k.startswith("encoder."):
                    m.params[k] = rng.normal(0.0, 0.4, size=v.shape)
        wave = rng.normal(size=1680) * 0.3
        t_fe = frontend_forward(t_cfg, teacher.params, wave)
        t_h = encode(t_fe, teacher.params, t_cfg).hiddens
        t_head = TeacherOutputHead.random(8, 4, 6, rng, 0.5)
        p_t = teacher_label_distribution(t_h[-1], t_head).numpy()
        s_head = StudentOutputHead.random(8, 4, rng)
        s_head.weight = rng.normal(0, 0.5, size=s_head.weight.shape)
        labels = rng.integers(0, 4, size=len(p_t))
        mask = np.zeros(len(p_t), dtype=bool)
        mask[::2] = True
        lmap = LayerMap(((1, 1), (2, 2)))

        def student_hiddens(p):
            return encode(frontend_forward(s_cfg, p, wave), p, s_cfg).hiddens

        def split(p):
            model = {k: v for k, v in p.items() if not k.startswith("head.")}
            return model, {k[5:]: v for k, v in p.items() if k.startswith("head.")}

        objectives = {
            "L_reg": lambda p: regression_loss(t_h, student_hiddens(p), lmap),
            "L_disc": lambda p: discriminative_loss(
                p_t, student_label_distribution(student_hiddens(split(p)[0])[-1], s_head.bind(split(p)[1]))),
            "masked CE": lambda p: hubert_pretrain_loss(
                teacher_label_distribution(encode(frontend_forward(t_cfg, split(p)[0], wave), split(p)[0], t_cfg,
                                                  ).last, t_head.bind(split(p)[1])), labels, mask),
            "L_frontend": lambda p: frontend_loss(t_fe, frontend_forward(s_cfg, p, wave), "l2"),
        }
        params = {
            "L_reg": dict(student.params),
            "L_disc": {**student.params, **{"head." + k: v for k, v in s_head.params().items()}},
            "masked CE": {**teacher.params, **{"head." + k: v for k, v in t_head.params().items()}},
            "L_frontend": dict(student.params),
        }
        for name, f in objectives.items():
            ps = params[name]
            # key biases shift every logit of a query equally, so their exact gradient is zero:
            # check those in absolute terms, everything else by relative error
            zero = [k for k in ps if k.endswith("attn.k.bias")]
            tape = Tape()
            g = backward(tape, f(tape.watch_all(ps)))
            assert all(np.abs(g[k]).max() < 1e-12 for k in zero)
            fixed = {k: ps[k] for k in zero}
            errs = grad_check_params(lambda q: f({**fixed, **q}), {k: v for k, v in ps.items() if k not in zero},
                                     max_coords=3, seed=1)
            worst = max(errs.values())
            c.note(f"{name} end-to-end {worst:.1e}")
            assert worst < 1e-4, (name, {k: e for k, e in errs.items() if e >= 1e-4})


# ---------------------------------------------------------------- 3

def test_criterion_3_loss_invariants():
    with Criterion(3, "loss invariants", budget_s=30.0) as c:
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(6), size=5)
            q = rng.dirichlet(np.ones(6), size=5)
            assert discriminative_loss(p, q).item() >= 0.0
            assert abs(discriminative_loss(p, p).item()) < 1e-12
        c.note("KL >= 0, KL(p,p) = 0")
        for n_cls in (2, 16, 100):
            uniform = np.full((9, n_cls), 1.0 / n_cls)
            val = hubert_pretrain_loss(uniform, rng.integers(0, n_cls, 9), rng.random(9) < 0.5).item()
            assert abs(val - math.log(n_cls)) < 1e-12
        c.note("uniform masked CE = ln C")
        h = [rng.normal(size=(7, 5)) for _ in range(4)]
        for k in (1, 3):
            lmap = LayerMap(tuple((i, i) for i in range(1, k + 1)))
            val = regression_loss(h, h, lmap).item()
            assert abs(val / k - 0.31326) < 1e-5
        c.note(f"L_reg minimum per entry {math.log1p(math.exp(-1)):.5f}")
        for N in (0, 1, 10):
            for step in range(1, 25):
                assert (loss_schedule(step, N) == "frontend") == (step <= N)
        c.note("schedule boundary step <= N")
        head = TeacherOutputHead.random(6, 5, 4, rng)
        x = rng.normal(size=(20, 6))
        base = np.argmax(teacher_label_distribution(x, head).numpy(), axis=-1)
        for tau in (0.01, 0.1, 3.0):
            for alpha in (1e-3, 1.0, 250.0):
                other = TeacherOutputHead(head.proj, head.label_emb, tau)
                assert np.array_equal(np.argmax(teacher_label_distribution(alpha * x, other).numpy(), axis=-1), base)
        c.note("teacher argmax invariant to tau and scale")


# ---------------------------------------------------------------- 4

@pytest.mark.slow
def test_criterion_4_distillation_smoke(corpus, trained_teacher):
    with Criterion(4, "distillation smoke", budget_s=1200.0) as c:
        c.t0 -= trained_teacher[1]
        run = trained_teacher[0]
        teacher = run.teacher
        ce = evaluate_teacher(teacher, corpus, run.labels)
        c.note(f"teacher masked CE {ce:.3f} (bound {0.5 * math.log(C):.3f})")
        assert ce < 0.5 * math.log(C)

        student = DEFAULT_TEACHER.replace(structure="dnt", d_model=32, d_ffn=32, n_heads=2)
        cfg = DistillConfig(student=student, total_steps=3000, batch_size=4, crop_frames=32, lr=2e-3, seed=0)
        d = distill(teacher, cfg, corpus)
        ratio = d.eval_final["loss"] / d.eval_start["loss"]
        c.note(f"D&T L_distill {d.eval_start['loss']:.3f} -> {d.eval_final['loss']:.3f} (x{ratio:.3f})")
        assert ratio <= 0.5

        self_cfg = DistillConfig(student=DEFAULT_TEACHER, total_steps=1, student_head="teacher_copy")
        s = distill(teacher, self_cfg, corpus, stop_after=0)
        c.note(f"self-distillation start L_disc {s.eval_start['disc_term']:.1e}")
        assert s.eval_start["disc_term"] < 1e-6


# ---------------------------------------------------------------- 5

ABLATION_STEPS = 1200
ABLATION_N = 200


@pytest.mark.slow
def test_criterion_5_schedule_ablation(corpus, trained_teacher):
    teacher = trained_teacher[0].teacher
    with Criterion(5, "two-stage schedule ablation", budget_s=1800.0) as c:
        student = DEFAULT_TEACHER.replace(structure="snw", n_layers=2, frontend_kind="fbank")
        finals = {}
        for N in (ABLATION_N, 0):
            vals = []
            for seed in range(3):
                cfg = DistillConfig(student=student, total_steps=ABLATION_STEPS, n_frontend=N, batch_size=4,
                                    crop_frames=32, lr=2e-3, seed=seed)
                vals.append(distill(teacher, cfg, corpus).eval_final["loss"])
            finals[N] = float(np.mean(vals))
            c.note(f"N={N}: final L_distill mean {finals[N]:.4f} ({', '.join(f'{v:.4f}' for v in vals)})")
        assert finals[ABLATION_N] < finals[0]


# ---------------------------------------------------------------- 6

def test_criterion_6_frontend_speedup():
    with Criterion(6, "front-end speedup", budget_s=300.0) as c:
        corpus = make_synthetic_dataset(SyntheticDatasetSpec(n_utterances=24, min_duration=2.5, max_duration=3.0),
                                        seed=3)
        waves = corpus.waveforms
        rng = np.random.default_rng(0)
        wf = Model.random(table1_config("dnt", "waveform"), rng)
        fb = Model.random(table1_config("dnt", "fbank"), rng)
        for threads in (1, 4):
            rep = bench_frontend(waves, wf, fb, threads=threads, repeats=2)
            assert rep.audio_seconds >= 60.0
            c.note(f"threads={threads}: front-end {rep.frontend_speedup:.1f}x, transformer ratio "
                   f"{rep.transformer_ratio:.3f}, total {rep.total_speedup:.2f}x")
            print(rep.summary())
            assert rep.frontend_speedup >= 10.0
            assert abs(rep.transformer_ratio - 1.0) <= 0.15


# ---------------------------------------------------------------- 7

def test_criterion_7_cca():
    with Criterion(7, "CCA suite", budget_s=30.0) as c:
        rng = np.random.default_rng(0)
        X = rng.normal(size=(500, 12))
        self_sim = cca_similarity(X, X)
        assert abs(self_sim - 1.0) < 1e-9
        A = rng.normal(size=(12, 12))
        Y = rng.normal(size=(500, 10))
        base = cca_similarity(X, Y)
        aff = cca_similarity(X @ A + rng.normal(size=12), Y * 3.0 - 7.0)
        assert abs(aff - base) < 1e-6
        noise = cca_similarity(rng.normal(size=(2000, 16)), rng.normal(size=(2000, 16)))
        c.note(f"self {self_sim:.12f}, affine diff {abs(aff - base):.1e}, noise {noise:.3f}")
        assert noise < 0.2


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism(tmp_path):
    with Criterion(8, "determinism and persistence", budget_s=300.0) as c:
        corpus = make_synthetic_dataset(SyntheticDatasetSpec(n_utterances=6, min_duration=0.6, max_duration=0.9,
                                                             n_states=4), seed=5)
        corpus_again = make_synthetic_dataset(SyntheticDatasetSpec(n_utterances=6, min_duration=0.6,
                                                                   max_duration=0.9, n_states=4), seed=5)
        assert all(np.array_equal(a, b) for a, b in zip(corpus.waveforms, corpus_again.waveforms))
        t_cfg = DEFAULT_TEACHER.replace(n_layers=2, d_model=16, d_ffn=32, n_heads=2, conv_pos_kernel=4,
                                        conv_pos_groups=2, vocab=4, frontend_channels=8)
        tc = TeacherTrainConfig(steps=4, batch_size=2, crop_frames=16, d_emb=8, seed=3)
        a, b = train_teacher(corpus, t_cfg, tc), train_teacher(corpus, t_cfg, tc)
        assert a.losses == b.losses
        assert checkpoint.dumps(a.teacher.to_tensors()) == checkpoint.dumps(b.teacher.to_tensors())
        c.note("teacher loss curve and checkpoint bit-identical")
        dc = DistillConfig(student=t_cfg.replace(structure="dnt", frontend_kind="fbank", d_model=8, d_ffn=8),
                           total_steps=6, n_frontend=2, batch_size=2, crop_frames=12, eval_batches=1, seed=4)
        da, db = distill(a.teacher, dc, corpus), distill(a.teacher, dc, corpus)
        assert [r.loss for r in da.log] == [r.loss for r in db.log]
        assert checkpoint.dumps(da.checkpoint()) == checkpoint.dumps(db.checkpoint())
        c.note("distillation loss curve and checkpoint bit-identical")
        checkpoint.save(tmp_path / "student.ckpt", da.checkpoint())
        loaded = Model.from_tensors(checkpoint.load(tmp_path / "student.ckpt"))
        audio = corpus.waveforms[0]
        before = forward(da.student, audio)[1].last.numpy()
        after = forward(loaded, audio)[1].last.numpy()
        assert before.tobytes() == after.tobytes()
        c.note("checkpoint round-trip forward bit-exact")
