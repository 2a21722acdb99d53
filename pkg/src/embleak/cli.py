"""Command-line entry point.

    embleak leak-build --corpus corpus.jsonl --backend victim:48:1 --sample-n 200 --out leak.jsonl
    embleak train --config run.json
    embleak attack --checkpoint runs/x/step-1000 --eval eval.jsonl --out recon.jsonl
    embleak evaluate --checkpoint runs/x/step-1000 --eval eval.jsonl --metrics rougeL,cos --out report.json
    embleak ablate --config run.json --axis leak_size --values 50,200,800 --out table.csv

Exit codes: 0 success, 2 usage, 3 data, 4 divergence, 5 external service.
"""

import argparse
import copy
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import DataError, EmbleakError, UsageError

log = logging.getLogger("embleak")

COMPONENTS = {
    # name: (mode, weight overrides); rows of the surrogate/adversarial/consistency on-off grid
    "direct": ("direct", {}),
    "surrogate": ("transfer", {"intra": 0.0, "inter": 0.0, "adv": 0.0}),
    "surrogate+adv": ("transfer", {"intra": 0.0, "inter": 0.0}),
    "surrogate+consist": ("transfer", {"adv": 0.0}),
    "full": ("transfer", {}),
}
AXES = ("components", "leak_size", "surrogate_backbone")


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    command: str
    config_hash: str | None
    seed: int | None
    started: str
    finished: str | None = None
    artifacts: dict = dataclasses.field(default_factory=dict)
    metrics: dict = dataclasses.field(default_factory=dict)

    def write(self, path):
        missing = [p for p in self.artifacts.values() if not Path(p).exists()]
        if missing:
            raise DataError(f"manifest lists missing artifacts: {missing}")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2), encoding="utf-8")
        os.replace(tmp, path)


def _manifest_path(out):
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _guard_output(out, overwrite):
    out = Path(out)
    if out.exists() and not overwrite:
        raise UsageError(f"{out} already exists; pass --overwrite to replace it")


def _csv_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


# leak-build ---------------------------------------------------------------


def cmd_leak_build(args):
    from .data import LeakedPair, load_corpus, sample_pairs, save_leak
    from .encoders import encode_batch, get_backend
    from .remote import fetch_remote_embeddings

    if bool(args.endpoint) == bool(args.backend):
        raise UsageError("give exactly one of --endpoint or --backend")
    _guard_output(args.out, args.overwrite)
    started = _now()
    corpus = load_corpus(args.corpus)
    texts = sample_pairs(corpus, args.sample_n, args.seed)
    if args.endpoint:
        emb = fetch_remote_embeddings(args.endpoint, texts, args.batch_size, args.max_retries,
                                      concurrency=args.concurrency)
    else:
        backend = get_backend(args.backend)
        emb = [row for i in range(0, len(texts), args.batch_size)
               for row in encode_batch(backend, texts[i : i + args.batch_size]).double().numpy()]
    save_leak(args.out, [LeakedPair(t, e) for t, e in zip(texts, emb)])
    RunManifest("leak-build", None, args.seed, started, _now(), {"leak": str(args.out)},
                {"n_pairs": len(texts)}).write(_manifest_path(args.out))
    print(f"wrote {len(texts)} leaked pairs to {args.out}")


def cmd_synth_corpus(args):
    from .clinical import generate_clinical_corpus
    from .data import save_corpus

    _guard_output(args.out, args.overwrite)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    save_corpus(args.out, generate_clinical_corpus(args.n, args.seed))
    print(f"wrote {args.n} synthetic notes to {args.out}")


# train --------------------------------------------------------------------


def _load_config(path, seed=None):
    from .pipeline import AttackConfig

    config = AttackConfig.load(path)
    if seed is not None:
        config.seed = seed
    return config.validate()


def _check_inputs(config):
    for key in ("leak_path", "corpus_path", "oracle_path"):
        p = getattr(config, key)
        if p and not Path(p).is_file():
            raise DataError(f"{key} not found: {p}")


def train_run(config, overwrite=False, resume=None, command="train"):
    from .pipeline import run_training

    _check_inputs(config)
    run_dir = config.run_dir
    if resume is None and run_dir.exists():
        if not overwrite:
            raise UsageError(f"run {run_dir} already exists; pass --overwrite to replace it")
        shutil.rmtree(run_dir)
    started = _now()
    result = run_training(config, resume_from=resume)
    config_path = run_dir / "config.json"
    config.save(config_path)
    n_logged = sum(1 for ln in result.metrics_log.read_text().splitlines() if ln.strip())
    manifest = RunManifest(
        command, config.fingerprint(), config.seed, started, _now(),
        {"checkpoint": str(result.checkpoint), "metrics_log": str(result.metrics_log), "config": str(config_path)},
        {"steps": result.steps, "logged_steps": n_logged, "adversarial_steps": result.adversarial_steps,
         "final_losses": result.final_losses},
    )
    manifest.write(run_dir / "manifest.json")
    return result, manifest


def cmd_train(args):
    config = _load_config(args.config, args.seed)
    result, _ = train_run(config, overwrite=args.overwrite, resume=args.resume)
    print(f"trained {result.steps} steps; checkpoint {result.checkpoint}")


# attack / evaluate --------------------------------------------------------


def _load_eval(path):
    from .data import load_leak

    pairs = load_leak(path)
    if not pairs:
        raise UsageError(f"evaluation file {path} is empty")
    return pairs


def cmd_attack(args):
    from .pipeline import load_checkpoint, run_attack

    _guard_output(args.out, args.overwrite)
    started = _now()
    ckpt = load_checkpoint(args.checkpoint)
    pairs = run_attack(ckpt, _load_eval(args.eval), strategy=args.decode, max_len=args.max_len)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="\n") as fh:
        for ref, rec in pairs:
            fh.write(json.dumps({"reference": ref, "reconstruction": rec}) + "\n")
    RunManifest("attack", ckpt["config_hash"], ckpt["config"]["seed"], started, _now(),
                {"reconstructions": str(out)}, {"n_examples": len(pairs)}).write(_manifest_path(out))
    print(f"wrote {len(pairs)} reconstructions to {out}")


def evaluate_checkpoint(ckpt, eval_pairs, metrics, *, evaluator=None, judge_endpoint=None, extractor=None,
                        decode=None, max_len=None):
    from .clinical import ClinicalRuleExtractor
    from .encoders import get_backend
    from .metrics import DecoderScorer, evaluate_pairs
    from .pipeline import load_attack_model, run_attack
    from .remote import HTTPTextClient

    decoder, tokenizer, ckpt = load_attack_model(ckpt)
    pairs = run_attack(ckpt, eval_pairs, strategy=decode, max_len=max_len)
    kwargs = {}
    if "ppl" in metrics:
        kwargs["scorer"] = DecoderScorer(decoder, tokenizer, ckpt["config"]["max_len"])
    if "cos" in metrics:
        kwargs["evaluator"] = get_backend(evaluator or ckpt["config"]["evaluator"])
    if "llm_eval" in metrics:
        if not judge_endpoint:
            raise UsageError("llm_eval needs --judge-endpoint")
        kwargs["judge"] = HTTPTextClient(judge_endpoint)
    if "nerr" in metrics:
        if extractor not in (None, "clinical-rules"):
            raise UsageError(f"unknown entity extractor {extractor!r}")
        kwargs["extractor"] = ClinicalRuleExtractor()
    return evaluate_pairs([r for r, _ in pairs], [c for _, c in pairs], metrics, **kwargs)


def cmd_evaluate(args):
    from .metrics import ALL_METRICS, DEFAULT_METRICS
    from .pipeline import load_checkpoint

    metrics = tuple(_csv_list(args.metrics)) if args.metrics else DEFAULT_METRICS
    bad = [m for m in metrics if m not in ALL_METRICS]
    if bad:
        raise UsageError(f"unknown metrics {bad}; choose from {list(ALL_METRICS)}")
    _guard_output(args.out, args.overwrite)
    started = _now()
    eval_pairs = _load_eval(args.eval)
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate_checkpoint(ckpt, eval_pairs, metrics, evaluator=args.evaluator,
                                 judge_endpoint=args.judge_endpoint, extractor=args.extractor,
                                 decode=args.decode, max_len=args.max_len)
    report.save(args.out)
    RunManifest("evaluate", ckpt["config_hash"], ckpt["config"]["seed"], started, _now(),
                {"report": str(args.out)}, report.aggregate()).write(_manifest_path(args.out))
    print(json.dumps(report.aggregate(), indent=2))


# ablate -------------------------------------------------------------------


def ablation_configs(base, axis, values, leak_sizes=None):
    """Expand ``base`` into ``[(label, config), ...]``; validates every value before anything trains."""
    from .encoders import is_known_backend

    if axis not in AXES:
        raise UsageError(f"axis must be one of {AXES}, got {axis!r}")
    seen, uniq = set(), []
    for v in values:
        if v in seen:
            log.warning("duplicate ablation value %r ignored", v)
            continue
        seen.add(v)
        uniq.append(v)
    if not uniq:
        raise UsageError("no ablation values given")
    if not base.eval_path:
        raise UsageError("ablation needs eval_path in the base config")
    out = []
    if axis == "components":
        bad = [v for v in uniq if v not in COMPONENTS]
        if bad:
            raise UsageError(f"unknown components {bad}; choose from {list(COMPONENTS)}")
        sizes = leak_sizes or [base.leak_size]
        for size in sizes:
            for v in uniq:
                mode, overrides = COMPONENTS[v]
                cfg = copy.deepcopy(base)
                cfg.mode = mode
                cfg.leak_size = size
                cfg.weights = dataclasses.replace(cfg.weights, **overrides)
                cfg.name = f"{base.name}-components-{v}-n{size}"
                out.append(({"axis": axis, "value": v, "leak_size": size}, cfg))
    elif axis == "leak_size":
        try:
            sizes = [int(v) for v in uniq]
        except ValueError as exc:
            raise UsageError(f"leak_size values must be integers: {uniq}") from exc
        if any(n < 1 for n in sizes):
            raise UsageError("leak sizes must be >= 1")
        from .data import load_leak

        available = len(load_leak(base.leak_path))
        too_big = [n for n in sizes if n > available]
        if too_big:
            raise UsageError(f"leak sizes {too_big} exceed the {available} leaked pairs")
        for n in sizes:
            cfg = copy.deepcopy(base)
            cfg.leak_size = n
            cfg.name = f"{base.name}-leak_size-{n}"
            out.append(({"axis": axis, "value": n, "leak_size": n}, cfg))
    else:
        bad = [v for v in uniq if not is_known_backend(v)]
        if bad:
            raise UsageError(f"unknown backbones {bad}")
        for i, v in enumerate(uniq):
            cfg = copy.deepcopy(base)
            cfg.backbone = v
            cfg.name = f"{base.name}-backbone-{i}"
            out.append(({"axis": axis, "value": v, "leak_size": base.leak_size}, cfg))
    for _, cfg in out:
        cfg.validate()
    return out


def _ablation_row(job):
    label, cfg, metrics, overwrite = job
    from .pipeline import load_checkpoint

    result, _ = train_run(cfg, overwrite=overwrite, command="ablate")
    report = evaluate_checkpoint(load_checkpoint(result.checkpoint), _load_eval(cfg.eval_path), metrics)
    row = dict(label)
    row.update(mode=cfg.mode, seed=cfg.seed, config_hash=cfg.fingerprint())
    agg = report.aggregate()
    for m in metrics:
        if m == "nerr":
            for cat, v in (agg.get("nerr") or {}).items():
                row[f"nerr_{cat}"] = v
        else:
            row[m] = agg.get(m)
    return row


def run_ablation(base, axis, values, out, *, leak_sizes=None, metrics=("rougeL", "ppl", "cos"), jobs=1,
                 overwrite=False):
    plan = ablation_configs(base, axis, values, leak_sizes)
    jobs_list = [(label, cfg, tuple(metrics), overwrite) for label, cfg in plan]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_ablation_row, jobs_list))
    else:
        rows = [_ablation_row(j) for j in jobs_list]
    fields = list(dict.fromkeys(k for r in rows for k in r))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def cmd_ablate(args):
    base = _load_config(args.config, args.seed)
    _guard_output(args.out, args.overwrite)
    started = _now()
    leak_sizes = [int(v) for v in _csv_list(args.leak_sizes)] if args.leak_sizes else None
    metrics = tuple(_csv_list(args.metrics)) if args.metrics else ("rougeL", "ppl", "cos")
    rows = run_ablation(base, args.axis, _csv_list(args.values), args.out, leak_sizes=leak_sizes,
                        metrics=metrics, jobs=args.jobs, overwrite=args.overwrite)
    RunManifest("ablate", base.fingerprint(), base.seed, started, _now(), {"table": str(args.out)},
                {"rows": len(rows)}).write(_manifest_path(args.out))
    print(f"wrote {len(rows)} rows to {args.out}")


# parser -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="embleak", description="Embedding-inversion attack toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    lb = sub.add_parser("leak-build", help="fabricate a leaked (text, embedding) file")
    lb.add_argument("--corpus", required=True)
    lb.add_argument("--endpoint", help="remote embedding service URL")
    lb.add_argument("--backend", help="local backend identifier, e.g. victim:48:1")
    lb.add_argument("--sample-n", type=int, required=True)
    lb.add_argument("--seed", type=int, default=0)
    lb.add_argument("--out", required=True)
    lb.add_argument("--batch-size", type=int, default=32)
    lb.add_argument("--max-retries", type=int, default=3)
    lb.add_argument("--concurrency", type=int, default=4)
    lb.add_argument("--overwrite", action="store_true")
    lb.set_defaults(func=cmd_leak_build)

    sc = sub.add_parser("synth-corpus", help="write a templated synthetic clinical corpus")
    sc.add_argument("--n", type=int, required=True)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--out", required=True)
    sc.add_argument("--overwrite", action="store_true")
    sc.set_defaults(func=cmd_synth_corpus)

    tr = sub.add_parser("train", help="train an attack from a JSON config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--overwrite", action="store_true")
    tr.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("attack", cmd_attack, "reconstruct text from private embeddings"),
        ("evaluate", cmd_evaluate, "reconstruct and score against ground truth"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--eval", required=True, help="leak-format JSONL of held-out pairs")
        sp.add_argument("--out", required=True)
        sp.add_argument("--decode", help="greedy | beam:<k> | top_k:<k>[:<temp>[:<seed>]]")
        sp.add_argument("--max-len", type=int)
        sp.add_argument("--overwrite", action="store_true")
        sp.set_defaults(func=func)
        if name == "evaluate":
            sp.add_argument("--metrics", help="comma list from rougeL,ppl,cos,llm_eval,nerr (default rougeL,ppl,cos)")
            sp.add_argument("--evaluator", help="encoder used for cos (default from the checkpoint config)")
            sp.add_argument("--judge-endpoint")
            sp.add_argument("--extractor", default="clinical-rules")

    ab = sub.add_parser("ablate", help="sweep one axis and tabulate metrics as CSV")
    ab.add_argument("--config", required=True)
    ab.add_argument("--axis", required=True, choices=AXES)
    ab.add_argument("--values", required=True, help="comma-separated axis values")
    ab.add_argument("--leak-sizes", help="components axis only: repeat the grid for each leak size")
    ab.add_argument("--metrics")
    ab.add_argument("--seed", type=int)
    ab.add_argument("--out", required=True)
    ab.add_argument("--jobs", type=int, default=1, help="run independent configurations in parallel")
    ab.add_argument("--overwrite", action="store_true")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except EmbleakError as exc:
        print(f"embleak {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
