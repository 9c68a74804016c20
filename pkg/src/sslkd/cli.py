"""``sslkd`` command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, checkpoint, config, data, encoder, labels, train
from .errors import ContractError, DataError, NumericError, SSLKDError

log = logging.getLogger("sslkd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(SSLKDError):
    pass


# ---------------------------------------------------------------- run directory

class RunDir:
    """Output directory that records every artifact for ``manifest.json``."""

    def __init__(self, path, force: bool):
        self.path = Path(path)
        if self.path.exists() and any(self.path.iterdir()) and not force:
            raise UsageError(f"output directory {self.path} is not empty (use --force)")
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def __truediv__(self, name) -> Path:
        p = self.path / name
        self.files.append(p)
        return p

    def add(self, paths) -> None:
        self.files.extend(Path(p) for p in paths)

    def write_manifest(self, command: str) -> None:
        entries = []
        for p in sorted(set(self.files)):
            entries.append({"path": str(p.relative_to(self.path)),
                            "sha256": hashlib.sha256(p.read_bytes()).hexdigest(), "bytes": p.stat().st_size})
        (self.path / "manifest.json").write_text(json.dumps({"command": command, "files": entries}, indent=2) + "\n")


def _resolved(run: RunDir, args: argparse.Namespace, sections: dict | None = None) -> None:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "force") and v is not None}
    all_sections = {"run": flags}
    all_sections.update(sections or {})
    config.write_config(run / "config.resolved", all_sections)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_corpus(path) -> data.Corpus:
    return data.load_corpus(_require_file(path, "data directory"))


def _sections(path) -> dict:
    return config.read_config(_require_file(path, "config file")) if path else {}


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> None:
    if args.spec and args.spec.lstrip().startswith("{"):
        try:
            spec = data.SyntheticDatasetSpec.from_dict(json.loads(args.spec))
        except json.JSONDecodeError as e:
            raise UsageError(f"--spec is not valid JSON: {e}") from e
    elif args.spec:
        spec_path = _require_file(args.spec, "spec file")
        if spec_path.suffix == ".json":
            spec = data.SyntheticDatasetSpec.from_dict(json.loads(spec_path.read_text()))
        else:
            spec = config.dataset_spec(config.read_config(spec_path).get("dataset", {}))
    else:
        spec = data.SyntheticDatasetSpec()
    run = RunDir(args.out, args.force)
    corpus = data.make_synthetic_dataset(spec, args.seed)
    run.add(data.save_corpus(corpus, run.path))
    _resolved(run, args, {"dataset": spec.to_dict()})
    run.write_manifest("gen-data")
    print(f"wrote {len(corpus)} utterances ({corpus.total_seconds:.1f} s) to {run.path}")


def cmd_kmeans_labels(args) -> None:
    corpus = _load_corpus(args.data)
    run = RunDir(args.out, args.force)
    codebook = train.fit_corpus_codebook(corpus, args.clusters, args.iters, args.seed)
    checkpoint.save(run / "kmeans.ckpt", codebook.to_tensors())
    labs = train.corpus_labels(corpus, codebook)
    with open(run / "labels.jsonl", "w") as fh:
        for i, lab in enumerate(labs):
            fh.write(json.dumps({"utt": i, "labels": lab.tolist()}) + "\n")
    report = {"clusters": args.clusters, "iterations": codebook.n_iter, "inertia": codebook.inertia_history}
    truth = [labels.decimate(s) for s in corpus.states]
    if any(t.any() for t in truth):
        n = [min(len(a), len(b)) for a, b in zip(labs, truth)]
        report["purity"] = labels.cluster_purity(np.concatenate([a[:k] for a, k in zip(labs, n)]),
                                                 np.concatenate([b[:k] for b, k in zip(truth, n)]))
        print(f"cluster purity {report['purity']:.3f}")
    (run / "kmeans.json").write_text(json.dumps(report, indent=2) + "\n")
    _resolved(run, args)
    run.write_manifest("kmeans-labels")


def cmd_train_teacher(args) -> None:
    sections = _sections(args.config)
    model_cfg, tcfg = config.teacher_configs(sections.get("teacher", {}))
    overrides = {"seed": args.seed}
    if args.steps is not None:
        overrides["steps"] = args.steps
    tcfg = config.dataclasses.replace(tcfg, **overrides)
    corpus = _load_corpus(args.data)
    run = RunDir(args.out, args.force)
    result = train.train_teacher(corpus, model_cfg, tcfg)
    checkpoint.save(run / "teacher.ckpt", result.teacher.to_tensors())
    with open(run / "loss.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(result.losses, 1):
            fh.write(f"{i},{v!r}\n")
    _resolved(run, args, {"teacher": config.teacher_section(model_cfg, tcfg)})
    run.write_manifest("train-teacher")
    if result.losses:
        print(f"final masked CE {result.losses[-1]:.4f} (ln C = {np.log(model_cfg.vocab):.4f})")


def cmd_distill(args) -> None:
    sections = _sections(args.config)
    teacher = train.Teacher.from_tensors(checkpoint.load(_require_file(args.teacher, "teacher checkpoint")))
    distill_sec = dict(sections.get("distill", {}))
    for key, val in (("lambda_reg", args.lambda_reg), ("lambda_disc", args.lambda_disc),
                     ("total_steps", args.steps), ("n_frontend", args.n_frontend)):
        if val is not None:
            distill_sec[key] = str(val)
    distill_sec["seed"] = str(args.seed)
    cfg = config.distill_config(sections.get("student", {}), distill_sec, teacher.model.config)
    corpus = _load_corpus(args.data)
    resume = checkpoint.load(_require_file(args.resume, "state checkpoint")) if args.resume else None
    run = RunDir(args.out, args.force)
    result = train.distill(teacher, cfg, corpus, resume=resume, stop_after=args.stop_after)
    checkpoint.save(run / "student.ckpt", result.checkpoint())
    checkpoint.save(run / "state.ckpt", result.state_checkpoint())
    train.write_loss_log(run / "loss.csv", result.log)
    summary = {"step": result.state.step, "n_frontend": cfg.frontend_steps, "total_steps": cfg.total_steps,
               "eval_phase2_start": result.eval_start, "eval_final": result.eval_final}
    (run / "eval.json").write_text(json.dumps(summary, indent=2) + "\n")
    _resolved(run, args, {"student": config.model_section(cfg.student), "distill": config.distill_section(cfg)})
    run.write_manifest("distill")
    if result.eval_start and result.eval_final:
        print(f"L_distill phase-2 start {result.eval_start['loss']:.4f} -> final {result.eval_final['loss']:.4f}")


def cmd_count_params(args) -> None:
    lines = []
    if args.table1:
        for structure in ("snw", "dnt"):
            for frontend in ("waveform", "fbank"):
                n = encoder.count_params(encoder.table1_config(structure, frontend))
                ref = encoder.REFERENCE_PARAMS_M[(structure, frontend)]
                dev = 100.0 * (n / 1e6 - ref) / ref
                lines.append(f"{structure:4s} {frontend:9s} {n:>12,d}  {n / 1e6:6.2f}M  reference: {ref:.2f}M  "
                             f"deviation {dev:+.2f}%")
    else:
        if args.config:
            sections = _sections(args.config)
            cfg = config.model_config(sections.get("student", {}), config.DEFAULT_TEACHER)
        else:
            cfg = encoder.table1_config(args.structure, args.frontend)
        n = encoder.count_params(cfg)
        line = f"{cfg.structure} {cfg.frontend_kind}: {n:,d} parameters ({n / 1e6:.2f}M)"
        key = (cfg.structure, cfg.frontend_kind)
        if not args.config and key in encoder.REFERENCE_PARAMS_M:
            ref = encoder.REFERENCE_PARAMS_M[key]
            line += f"  reference: {ref:.2f}M  deviation {100.0 * (n / 1e6 - ref) / ref:+.2f}%"
        lines.append(line)
    print("\n".join(lines))
    if args.out:
        run = RunDir(args.out, args.force)
        (run / "count_params.txt").write_text("\n".join(lines) + "\n")
        _resolved(run, args)
        run.write_manifest("count-params")


def _load_model(path) -> encoder.Model:
    return encoder.Model.from_tensors(checkpoint.load(_require_file(path, "checkpoint")), "model.")


def cmd_cca(args) -> None:
    a, b = _load_model(args.a), _load_model(args.b)
    corpus = _load_corpus(args.data)
    waves = corpus.waveforms[:args.max_utts]
    run = RunDir(args.out, args.force)
    dump_a = analysis.collect_activations(a, waves, str(args.a), str(args.data))
    dump_b = analysis.collect_activations(b, waves, str(args.b), str(args.data))
    if args.dump:
        run.add(dump_a.write(run.path / "dump_a"))
        run.add(dump_b.write(run.path / "dump_b"))
    sims = analysis.dump_cca_report(dump_a, dump_b)
    run.add(analysis.write_cca_report(run.path, sims))
    _resolved(run, args)
    run.write_manifest("cca")
    for i, s in enumerate(sims):
        print(f"layer {i:2d}  {s:.6f}")


def cmd_bench_frontend(args) -> None:
    if args.data:
        waves = _load_corpus(args.data).waveforms
    else:
        rng = np.random.default_rng(args.seed)
        waves = [rng.normal(0.0, 0.1, size=int(args.seconds * 16000))]
    if args.waveform and args.fbank:
        wf, fb = _load_model(args.waveform), _load_model(args.fbank)
    else:
        wf = encoder.Model.random(encoder.table1_config(args.structure, "waveform"), args.seed)
        fb = encoder.Model.random(encoder.table1_config(args.structure, "fbank"), args.seed)
    run = RunDir(args.out, args.force)
    reports = []
    for n in [int(x) for x in args.bench_threads.split(",")]:
        reports.append(analysis.bench_frontend(waves, wf, fb, threads=n, repeats=args.repeats))
        print(reports[-1].summary())
    analysis.write_bench_csv(run / "bench.csv", reports)
    _resolved(run, args)
    run.write_manifest("bench-frontend")


def cmd_replay(args) -> int:
    """Re-run the command recorded in a ``config.resolved`` into a new directory."""
    sections = config.read_config(_require_file(args.resolved, "resolved config"))
    flags = sections.get("run")
    if not flags or "command" not in flags:
        raise UsageError(f"{args.resolved} has no [run] section")
    argv = [flags["command"]]
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[flags["command"]]
    for action in sub._actions:
        if action.dest in ("help", "out", "force", "config") or action.dest not in flags:
            continue
        val = flags[action.dest]
        opt = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            if val == "True":
                argv.append(opt)
        else:
            argv += [opt, val]
    if flags["command"] in ("train-teacher", "distill"):
        argv += ["--config", str(args.resolved)]
    argv += ["--out", args.out] + (["--force"] if args.force else [])
    if "threads" in flags:
        argv = ["--threads", flags["threads"]] + argv
    return main(argv)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sslkd", description="Self-supervised speech model distillation toolkit.")
    p.add_argument("--threads", type=int, default=1, help="worker threads for numeric kernels (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=func)
        return sp

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
        sp.add_argument("--out", required=out_required, help="run directory for artifacts")
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty run directory")

    sp = add("gen-data", cmd_gen_data, "Generate a synthetic corpus of WAV files and state sequences.")
    sp.add_argument("--spec", help="dataset spec: inline JSON object, .json file, or config file with a [dataset] section")
    common(sp)

    sp = add("kmeans-labels", cmd_kmeans_labels, "Fit K-Means on corpus MFCCs and write frame pseudo-labels.")
    sp.add_argument("--data", required=True, help="corpus directory")
    sp.add_argument("--clusters", type=int, default=16, help="number of clusters C (default 16)")
    sp.add_argument("--iters", type=int, default=50, help="maximum Lloyd iterations (default 50)")
    common(sp)

    sp = add("train-teacher", cmd_train_teacher, "Pretrain a teacher by masked pseudo-label prediction.")
    sp.add_argument("--data", required=True, help="corpus directory")
    sp.add_argument("--config", help="config file with a [teacher] section")
    sp.add_argument("--steps", type=int, help="training steps (overrides the config)")
    common(sp)

    sp = add("distill", cmd_distill, "Distill a teacher checkpoint into a student.")
    sp.add_argument("--teacher", required=True, help="teacher checkpoint from train-teacher")
    sp.add_argument("--data", required=True, help="corpus directory")
    sp.add_argument("--config", help="config file with [student] and [distill] sections")
    sp.add_argument("--steps", type=int, help="total steps (overrides the config)")
    sp.add_argument("--n-frontend", type=int, help="front-end-only steps N (overrides the config)")
    sp.add_argument("--lambda-reg", type=float, help="regression loss weight (overrides the config)")
    sp.add_argument("--lambda-disc", type=float, help="discriminative loss weight (overrides the config)")
    sp.add_argument("--resume", help="state checkpoint to resume from")
    sp.add_argument("--stop-after", type=int, help="stop after this step (for later --resume)")
    common(sp)

    sp = add("count-params", cmd_count_params, "Count model parameters.")
    sp.add_argument("--structure", default="dnt", help="student structure: snw (S&W) or dnt (D&T)")
    sp.add_argument("--frontend", default="waveform", choices=["waveform", "fbank"], help="front-end kind")
    sp.add_argument("--table1", action="store_true", help="print all four reference configs with deviations")
    sp.add_argument("--config", help="count a [student] section from a config file instead")
    common(sp, out_required=False)

    sp = add("cca", cmd_cca, "Layer-wise CCA similarity between two model checkpoints.")
    sp.add_argument("--a", required=True, help="first checkpoint")
    sp.add_argument("--b", required=True, help="second checkpoint")
    sp.add_argument("--data", required=True, help="corpus directory")
    sp.add_argument("--max-utts", type=int, default=20, help="utterances to pool frames from (default 20)")
    sp.add_argument("--dump", action="store_true", help="also write per-layer FEAT01 activation dumps")
    common(sp)

    sp = add("bench-frontend", cmd_bench_frontend, "Time waveform vs Fbank front-ends and transformer stages.")
    sp.add_argument("--data", help="corpus directory (default: random audio of --seconds)")
    sp.add_argument("--seconds", type=float, default=60.0, help="length of random audio (default 60)")
    sp.add_argument("--waveform", help="waveform-front-end checkpoint (default: random full-size model)")
    sp.add_argument("--fbank", help="Fbank-front-end checkpoint (default: random full-size model)")
    sp.add_argument("--structure", default="dnt", help="structure of the default random models")
    sp.add_argument("--bench-threads", default="1,4", help="comma-separated thread counts (default 1,4)")
    sp.add_argument("--repeats", type=int, default=2, help="timed passes per stage, fastest kept (default 2)")
    common(sp)

    sp = add("replay", cmd_replay, "Re-run the command recorded in a config.resolved file.")
    sp.add_argument("resolved", help="config.resolved written by an earlier run")
    sp.add_argument("--out", required=True, help="run directory for artifacts")
    sp.add_argument("--force", action="store_true", help="allow writing into a non-empty run directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            rc = args.func(args)
        return rc or EXIT_OK
    except (UsageError, ContractError, FileNotFoundError) as e:
        print(f"sslkd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"sslkd: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SSLKDError, ValueError) as e:
        print(f"sslkd: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
