"""Command-line entry point: ``longtail-crs <subcommand> [flags]``.

Exit status 0 on success, 1 when a module rejects its input (a JSON error
object goes to stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import (AugmentTarget, ChatJudge, HttpChatClient, MockChatClient, MockJudge, ReviewQueue,
                      run_pipeline, write_augmented)
from .config import RunConfig, RunManifest, load_config
from .corpus import Corpus, Segmentation, build_subsets, compute_popularity, corpus_stats, ingest, segment
from .embed import make_embedder
from .errors import ConfigError
from .metrics import RankedList, evaluate
from .prototype import FeatureStore, Prototype, build_support_union, select_prototypes, top_k_neighbors
from .trainer import (ExperimentConfig, SyntheticSpec, TrainConfig, co_mention_vectors,
                      experiment, fit_corpus)

logger = logging.getLogger("longtail_crs")


class CliError(Exception):
    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path


def _dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _read_json(path: Path):
    if not path.is_file():
        raise CliError(f"file not found: {path}", str(path))
    return json.loads(path.read_text(encoding="utf-8"))


class Run:
    """One subcommand invocation: resolved config, output dir and manifest."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, cfg.digest())

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"file not found: {p}", str(p))
        self.manifest.add_input(p)
        return p

    def emit(self, path: Path) -> Path:
        self.manifest.add_artifact(path)
        return path

    def corpus(self) -> Corpus:
        if not self.cfg.corpus:
            raise ConfigError("no corpus given (use --corpus or the 'corpus' config key)")
        self.cfg.check_paths()
        corpora = [ingest(self.input(p)) for p in self.cfg.corpus]
        if len(corpora) == 1:
            return corpora[0]
        dialogues, catalog, warnings = [], {}, []
        for c in corpora:
            dialogues += c.dialogues
            catalog.update(c.catalog)
            warnings += c.warnings
        return Corpus(dialogues, catalog, warnings)

    def segmentation(self, corpus: Corpus) -> Segmentation:
        s = self.cfg.segmentation
        return segment(compute_popularity(corpus), s.tail_max, s.body_max, s.mode)

    def finish(self) -> None:
        self.manifest.write(self.out)


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(run: Run, args) -> None:
    corpus = run.corpus()
    summary = {"n_dialogues": len(corpus.dialogues), "n_catalog": len(corpus.catalog),
               "n_mentions": sum(len(d.mentions) for d in corpus.dialogues), "warnings": corpus.warnings}
    run.emit(_dump(summary, run.out / "ingest.json"))


def cmd_segment(run: Run, args) -> None:
    seg = run.segmentation(run.corpus())
    run.emit(_dump(seg.to_json(), run.out / "segmentation.json"))


def cmd_stats(run: Run, args) -> None:
    corpus = run.corpus()
    seg = run.segmentation(corpus)
    report = corpus_stats(corpus, seg)
    run.emit(_dump(report.to_json(), run.out / "stats.json"))
    md = run.out / "stats.md"
    md.write_text(report.to_markdown(), encoding="utf-8")
    run.emit(md)
    sys.stdout.write(report.to_markdown())


def _store(run: Run, corpus: Corpus) -> FeatureStore:
    e = run.cfg.embed
    embedder = make_embedder(e.embedder, e.dim, **({"url": e.url, "model": e.model} if e.embedder == "remote" else {}))
    embedder.fit(d.text for d in corpus.dialogues)
    return FeatureStore.from_corpus(corpus, embedder)


def _prototypes(run: Run, corpus: Corpus, store: FeatureStore, seg: Segmentation) -> list[Prototype]:
    subsets = build_subsets(corpus, seg)
    return select_prototypes(subsets, store, run.cfg.retrieval.strategy, run.cfg.module_seed("prototype"))


def _tier(seg: Segmentation, movie_id: str) -> str:
    return "tail" if movie_id in seg.tail else "body"


def cmd_select_prototypes(run: Run, args) -> None:
    corpus = run.corpus()
    seg = run.segmentation(corpus)
    protos = _prototypes(run, corpus, _store(run, corpus), seg)
    rows = [{**p.to_json(), "tier": _tier(seg, p.movie_id), "neighbors": []} for p in protos]
    run.emit(_dump(rows, run.out / "prototypes.json"))


def _load_or_select(run: Run, corpus, store, seg, path: Path | None) -> list[Prototype]:
    if path is None:
        return _prototypes(run, corpus, store, seg)
    rows = _read_json(run.input(path))
    return [store.prototype(r["movie_id"], r["prototype_dialogue_id"]) for r in rows]


def cmd_retrieve(run: Run, args) -> None:
    corpus = run.corpus()
    seg = run.segmentation(corpus)
    store = _store(run, corpus)
    protos = _load_or_select(run, corpus, store, seg, Path(args.prototypes) if args.prototypes else None)
    K, w = run.cfg.retrieval.K, run.cfg.similarity
    rows = [{**top_k_neighbors(p, store, K, w).to_json(), "tier": _tier(seg, p.movie_id)} for p in protos]
    run.emit(_dump(rows, run.out / "prototypes.json"))
    union = sorted(build_support_union(protos, store, K, w))
    run.emit(_dump({"K": K, "dialogue_ids": union}, run.out / "support_union.json"))


def _chat_client(run: Run):
    c = run.cfg.chat
    if c.generator == "mock":
        return MockChatClient()
    if c.generator == "http":
        if not c.url or not c.model:
            raise ConfigError("[chat] url and model are required for the http generator")
        return HttpChatClient(c.url, c.model)
    raise ConfigError(f"unknown generator {c.generator!r}")


def _judges(run: Run):
    c, a = run.cfg.chat, run.cfg.augment
    if c.judges == "mock":
        return [MockJudge(f"mock-{i}", a.judge_pass_threshold) for i in range(a.judge_count)]
    if c.judges == "http":
        if len(c.judge_models) != a.judge_count:
            raise ConfigError(f"[chat] judge_models must list {a.judge_count} models")
        return [ChatJudge(m, HttpChatClient(c.url, m), a.judge_pass_threshold) for m in c.judge_models]
    raise ConfigError(f"unknown judge backend {c.judges!r}")


def cmd_augment(run: Run, args) -> None:
    corpus = run.corpus()
    seg = run.segmentation(corpus)
    store = _store(run, corpus)
    by_id = corpus.by_id()
    protos = _load_or_select(run, corpus, store, seg, Path(args.prototypes) if args.prototypes else None)
    n_prompt = run.cfg.augment.prompt_neighbors
    targets = []
    for p in protos:
        sup = top_k_neighbors(p, store, max(1, min(run.cfg.retrieval.K, n_prompt)), run.cfg.similarity)
        targets.append(AugmentTarget(p.movie_id, _tier(seg, p.movie_id), corpus.catalog[p.movie_id],
                                     by_id[p.dialogue_id], p.semantic, [by_id[i] for i in sup.ids]))
    acfg = dataclasses.replace(run.cfg.augment, seed=run.cfg.module_seed("augment"))
    queue = ReviewQueue(run.out / "review_queue.jsonl", acfg)
    result = run_pipeline(targets, corpus, acfg, _chat_client(run), _judges(run), store.embedder, queue)
    aug = run.out / "augmented.jsonl"
    n = write_augmented(result.corpus, aug)
    run.emit(aug)
    cand = run.out / "candidates.jsonl"
    cand.write_text("".join(json.dumps(c.to_json(), sort_keys=True) + "\n" for c in result.candidates),
                    encoding="utf-8")
    run.emit(cand)
    summary = {"targets": len(targets), "states": result.counts(), "integrated": n,
               "cap": result.report.cap, "dropped_by_cap": result.report.dropped_by_cap,
               "skipped": result.report.skipped, "errors": result.errors}
    run.emit(_dump(summary, run.out / "augment.json"))
    if (run.out / "review_queue.jsonl").exists():
        run.emit(run.out / "review_queue.jsonl")


def cmd_review(run: Run, args) -> None:
    path = Path(args.queue) if args.queue else run.out / "review_queue.jsonl"
    if not path.is_file():
        raise CliError(f"file not found: {path}", str(path))
    queue = ReviewQueue(path, run.cfg.augment)
    if args.approve or args.reject:
        cid, decision = (args.approve, "approved") if args.approve else (args.reject, "rejected")
        cand = queue.resolve(cid, decision)
        sys.stdout.write(json.dumps({"candidate_id": cid, "resolution": decision, "state": cand.state}) + "\n")
        run.emit(path)
    else:
        for e in queue.pending():
            sys.stdout.write(json.dumps({"candidate_id": e.candidate_id, "pass_count": e.pass_count}) + "\n")


def cmd_train(run: Run, args) -> None:
    corpus = run.corpus()
    if args.augmented:
        extra = ingest(run.input(args.augmented), corpus.catalog)
        corpus = Corpus(corpus.dialogues + extra.dialogues, {**corpus.catalog, **extra.catalog})
    ex = run.cfg.experiment
    lr = args.lr if args.lr is not None else {"ce": ex.lr_ce, "focal": ex.lr_focal, "acfl": ex.lr_acfl}[args.loss]
    tcfg = TrainConfig(loss_kind=args.loss, epochs=ex.epochs, lr=lr, acfl=run.cfg.acfl,
                       seed=run.cfg.module_seed("train"))
    result, lists, _ = fit_corpus(corpus, tcfg, seed=run.cfg.module_seed("split"), k=max(run.cfg.k_values))
    curve = run.out / "loss_curve.csv"
    curve.write_text(result.curve_csv(), encoding="utf-8")
    run.emit(curve)
    rk = run.out / "rankings.jsonl"
    rk.write_text("".join(json.dumps({"query_id": l.query_id, "ranking": list(l.ranking),
                                      "relevant": sorted(l.relevant)}) + "\n" for l in lists), encoding="utf-8")
    run.emit(rk)
    model = run.out / "model.npz"
    with model.open("wb") as fh:
        np.savez(fh, weights=result.model.weights, bias=result.model.bias, items=np.array(result.model.items))
    run.emit(model)
    run.emit(_dump({"loss": args.loss, "lr": lr, "epochs": ex.epochs, "n_test": len(lists),
                    "final_train_loss": result.train_loss[-1] if result.train_loss else None},
                   run.out / "train.json"))


def cmd_evaluate(run: Run, args) -> None:
    path = Path(args.rankings) if args.rankings else run.out / "rankings.jsonl"
    if not path.is_file():
        raise CliError(f"rankings file not found: {path}", str(path))
    run.input(path)
    lists = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                obj = json.loads(line)
                lists.append(RankedList(str(obj["query_id"]), obj["ranking"], obj["relevant"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CliError(f"{path}:{lineno}: bad ranking record ({exc})", str(path)) from None
    corpus = run.corpus()
    seg = run.segmentation(corpus)
    pop = compute_popularity(corpus)
    report = evaluate(lists, run.cfg.k_values, len(corpus.catalog), seg.tail, pop.pop, co_mention_vectors(corpus))
    run.emit(_dump(report.to_json(), run.out / "metrics.json"))
    md = run.out / "report.md"
    md.write_text(report.to_markdown(), encoding="utf-8")
    run.emit(md)


def experiment_config(cfg: RunConfig) -> ExperimentConfig:
    ex = cfg.experiment
    acfl = dataclasses.replace(cfg.acfl, k=ex.acfl_k, theta_max=ex.acfl_theta_max)
    return ExperimentConfig(epochs=ex.epochs, lr={"ce": ex.lr_ce, "focal": ex.lr_focal, "acfl": ex.lr_acfl},
                            acfl=acfl, tail_max=cfg.segmentation.tail_max, body_max=cfg.segmentation.body_max)


def cmd_experiment(run: Run, args) -> None:
    ex = run.cfg.experiment
    synth = SyntheticSpec(n_items=ex.n_items, n_dialogues=ex.n_dialogues, zipf_exponent=ex.zipf_exponent,
                         seed=run.cfg.seed)
    report = experiment(synth, ex.loss_kinds, range(ex.seeds), run.cfg.k_values, experiment_config(run.cfg),
                        workers=args.workers)
    run.emit(_dump(report.to_json(), run.out / "metrics.json"))
    md = run.out / "report.md"
    md.write_text(report.to_markdown(), encoding="utf-8")
    run.emit(md)
    curves = run.out / "loss_curves.csv"
    lines = ["loss,seed,epoch,train_loss,val_loss"]
    for (kind, seed), res in sorted(report.curves.items()):
        for e, (a, b) in enumerate(zip(res.train_loss, res.val_loss)):
            lines.append(f"{kind},{seed},{e},{a!r},{b!r}")
    curves.write_text("\n".join(lines) + "\n", encoding="utf-8")
    run.emit(curves)


def render_report(obj: dict) -> str:
    """Markdown for either an ``evaluate`` or an ``experiment`` metrics.json."""
    if "metrics" in obj:
        vals = obj["metrics"]
        cols = list(vals)
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
        return ("| " + " | ".join(cols) + " |\n|" + "---:|" * len(cols) + "\n| "
                + " | ".join(fmt(vals[c]) for c in cols) + " |\n")
    if "rows" in obj:
        rows = obj["rows"]
        metrics = [k for k in rows[0] if k not in ("loss", "seed")]
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
        lines = ["| Loss | Seed | " + " | ".join(metrics) + " |", "|---|---:|" + "---:|" * len(metrics)]
        for r in rows:
            lines.append(f"| {r['loss']} | {r['seed']} | " + " | ".join(fmt(r[m]) for m in metrics) + " |")
        for kind, meds in obj.get("medians", {}).items():
            lines.append(f"| {kind} | median | " + " | ".join(fmt(meds.get(m)) for m in metrics) + " |")
        wins = obj.get("wins_vs_ce") or {}
        if wins:
            n = len({r["seed"] for r in rows})
            lines += ["", f"Wins against ce over {n} seeds (PWP: lower is better):", ""]
            for kind, w in wins.items():
                lines.append(f"- {kind}: " + ", ".join(f"{m} {c}/{n}" for m, c in w.items()))
        return "\n".join(lines) + "\n"
    raise CliError("metrics file has neither 'metrics' nor 'rows'")


def cmd_report(run: Run, args) -> None:
    path = Path(args.metrics) if args.metrics else run.out / "metrics.json"
    obj = _read_json(run.input(path))
    md = run.out / "report.md"
    md.write_text(render_report(obj), encoding="utf-8")
    run.emit(md)


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--corpus", action="append", help="corpus JSON-lines file (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _seg_flags(p):
    p.add_argument("--tail-max", type=int, dest="segmentation.tail_max")
    p.add_argument("--body-max", type=int, dest="segmentation.body_max")
    p.add_argument("--mode", choices=("fixed", "quartile"), dest="segmentation.mode")


def _k_list(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="longtail-crs", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a corpus and report warnings")
    _common(p)
    p = sub.add_parser("segment", help="head/body/tail segmentation")
    _common(p)
    _seg_flags(p)
    p = sub.add_parser("stats", help="group title and mention shares")
    _common(p)
    _seg_flags(p)
    p = sub.add_parser("select-prototypes", help="one prototype dialogue per body/tail movie")
    _common(p)
    _seg_flags(p)
    p.add_argument("--strategy", choices=("medoid", "random", "centroid"), dest="retrieval.strategy")
    p = sub.add_parser("retrieve", help="top-K support sets for each prototype")
    _common(p)
    _seg_flags(p)
    p.add_argument("-K", type=int, dest="retrieval.K")
    p.add_argument("--strategy", choices=("medoid", "random", "centroid"), dest="retrieval.strategy")
    p.add_argument("--prototypes", help="prototypes.json from select-prototypes")
    p = sub.add_parser("augment", help="generate, filter, judge and integrate dialogues")
    _common(p)
    _seg_flags(p)
    p.add_argument("--prototypes")
    p.add_argument("--generator", choices=("mock", "http"), dest="chat.generator")
    p.add_argument("--judges", choices=("mock", "http"), dest="chat.judges")
    p.add_argument("--temperature", type=float, dest="augment.temperature")
    p.add_argument("--rho", type=float, dest="augment.rho")
    p.add_argument("--max-in-flight", type=int, dest="augment.max_in_flight")
    p = sub.add_parser("review", help="list or resolve human-review entries")
    _common(p)
    p.add_argument("--queue")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--approve", metavar="ID")
    g.add_argument("--reject", metavar="ID")
    p = sub.add_parser("train", help="train the linear recommender on a corpus")
    _common(p)
    _seg_flags(p)
    p.add_argument("--loss", choices=("ce", "focal", "acfl"), default="acfl")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, dest="experiment.epochs")
    p.add_argument("--augmented", help="augmented.jsonl to add to the training data")
    p.add_argument("--k", type=_k_list, dest="k_values")
    p = sub.add_parser("evaluate", help="metrics for a rankings file")
    _common(p)
    _seg_flags(p)
    p.add_argument("--rankings")
    p.add_argument("--k", type=_k_list, dest="k_values")
    p = sub.add_parser("experiment", help="CE / focal / ACFL comparison on synthetic corpora")
    _common(p)
    _seg_flags(p)
    p.add_argument("--seeds", type=int, dest="experiment.seeds")
    p.add_argument("--loss-kinds", type=lambda s: tuple(s.split(",")), dest="experiment.loss_kinds")
    p.add_argument("--epochs", type=int, dest="experiment.epochs")
    p.add_argument("--n-items", type=int, dest="experiment.n_items")
    p.add_argument("--n-dialogues", type=int, dest="experiment.n_dialogues")
    p.add_argument("--zipf", type=float, dest="experiment.zipf_exponent")
    p.add_argument("--k", type=_k_list, dest="k_values")
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("report", help="render report.md from a metrics.json")
    _common(p)
    p.add_argument("--metrics")
    return ap


COMMANDS = {
    "ingest": cmd_ingest, "segment": cmd_segment, "stats": cmd_stats,
    "select-prototypes": cmd_select_prototypes, "retrieve": cmd_retrieve, "augment": cmd_augment,
    "review": cmd_review, "train": cmd_train, "evaluate": cmd_evaluate, "experiment": cmd_experiment,
    "report": cmd_report,
}


def _overrides(args) -> dict:
    ov = {k: v for k, v in vars(args).items() if "." in k or k == "k_values"}
    ov["out"] = args.out
    ov["seed"] = args.seed
    ov["corpus"] = args.corpus
    return ov


def _error(exc: Exception) -> dict:
    err = {"error": type(exc).__name__, "message": str(exc)}
    path = getattr(exc, "path", None) or getattr(exc, "filename", None)
    if path:
        err["path"] = str(path)
    return err


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        run = Run(args.command, cfg)
        COMMANDS[args.command](run, args)
        run.finish()
    except (CliError, ConfigError, ValueError, KeyError, OSError, RuntimeError) as exc:
        sys.stderr.write(json.dumps(_error(exc), sort_keys=True) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
