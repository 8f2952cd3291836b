"""Pipeline CLI: fixture generation, ingestion, graph build/stats, embedding,
indexing, retrieval, config sweeps, curation, evaluation, and the review
service.  Stages read and write versioned artifacts under the run directory
and skip themselves when inputs are unchanged (content hashing)."""

from __future__ import annotations

import gzip
import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import curation as cur_mod
from . import fixtures as fixtures_mod
from . import metrics as metrics_mod
from . import retrieval as retrieval_mod
from .config import PipelineConfig, load_config
from .curation import CuratedSet, MockChatProvider, RemoteChatProvider
from .embedding import (
    DeterministicLocalProvider,
    EmbeddingCache,
    RemoteEmbeddingProvider,
    embed_all,
    node_text,
)
from .errors import CuisetError
from .graph import build_graph, graph_stats, load_graph, restrict_graph, save_graph
from .review import AuthConfig, ReviewStore, create_app
from .rrf import ParseReport, parse_attributes, parse_concepts, parse_relations
from .runstore import RunDir
from .vectorindex import VectorIndex, load_index, save_index


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Pipeline config YAML.")
@click.option("--run-dir", "run_dir", type=click.Path(), default=None)
@click.option("--provider", default=None, help="Chat provider override (mock-permissive, mock-strict, remote).")
@click.option("--runs", type=int, default=None, help="Curation runs override.")
@click.option("--chunk-size", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--hops", type=int, default=None)
@click.option("--max-neighbours", "max_neighbours", type=int, default=None)
@click.pass_context
def main(ctx, config_path, run_dir, provider, runs, chunk_size, k, hops, max_neighbours):
    if config_path:
        if not Path(config_path).exists():
            raise click.ClickException(f"config file not found: {config_path}")
        cfg = load_config(config_path)
    else:
        cfg = PipelineConfig()
    if run_dir:
        cfg.run_dir = Path(run_dir)
    if provider:
        cfg.chat.provider = provider
    if runs is not None:
        cfg.curation.n_runs = runs
    if chunk_size is not None:
        cfg.curation.chunk_size = chunk_size
    if k is not None or hops is not None or max_neighbours is not None:
        old = cfg.retrieval
        cfg.retrieval = retrieval_mod.RetrievalConfig(
            k=k if k is not None else old.k,
            hops=hops if hops is not None else old.hops,
            max_neighbours=max_neighbours if max_neighbours is not None else old.max_neighbours,
            child_depth=old.child_depth,
            semantic_types=old.semantic_types,
        )
    ctx.obj = cfg


def _cfg(ctx) -> PipelineConfig:
    return ctx.obj


def _embedding_provider(cfg: PipelineConfig):
    e = cfg.embedding
    if e.provider == "local":
        return DeterministicLocalProvider(dimension=e.dimension, seed=e.seed)
    return RemoteEmbeddingProvider(
        model=e.model, dimension=e.dimension, api_base=e.api_base, api_key_env=e.api_key_env
    )


def _chat_provider(cfg: PipelineConfig):
    c = cfg.chat
    if c.provider in ("mock-permissive", "mock-strict"):
        return MockChatProvider(profile=c.provider.split("-", 1)[1], model=c.model)
    return RemoteChatProvider(
        model=c.model, api_base=c.api_base, api_key_env=c.api_key_env, options=c.options
    )


# -- fixture ----------------------------------------------------------------


@main.group()
def fixture():
    """Synthetic RRF fixtures."""


@fixture.command("generate")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--n", "n_concepts", type=int, default=600, show_default=True)
@click.pass_context
def fixture_generate(ctx, out_dir, seed, n_concepts):
    cfg = _cfg(ctx)
    out = Path(out_dir) if out_dir else cfg.rrf_dir
    manifest = fixtures_mod.generate_fixture(out, seed=seed, n_concepts=n_concepts)
    click.echo(
        f"fixture: {manifest['n_concepts']} concepts, "
        f"{manifest['counts']['mrconso_lines']} MRCONSO lines, "
        f"{len(manifest['targets'])} targets -> {out}"
    )


# -- ingest -----------------------------------------------------------------


@main.command()
@click.pass_context
def ingest(ctx):
    """Parse RRF files into normalized record artifacts."""
    cfg = _cfg(ctx)
    run = RunDir(cfg.run_dir)
    files = [cfg.rrf_file(n) for n in ("MRCONSO", "MRREL", "MRDEF", "MRSTY")]
    for path in files:
        run.require("ingest", path)
    fp = run.fingerprint(files, {"vocabularies": cfg.vocabularies, "language": cfg.language})
    out_dir = run.subdir("ingest")
    outputs = [
        out_dir / "atoms.jsonl.gz",
        out_dir / "relations.jsonl.gz",
        out_dir / "attributes.json.gz",
        out_dir / "report.json",
    ]
    if run.is_current("ingest", fp):
        click.echo("ingest: up to date")
        return
    with run.lock():
        vocabs = set(cfg.vocabularies)
        reports = {name: ParseReport() for name in ("MRCONSO", "MRREL", "MRDEF", "MRSTY")}
        with gzip.open(outputs[0], "wt", encoding="utf-8") as fh:
            for atom in parse_concepts(files[0], vocabs, cfg.language, reports["MRCONSO"]):
                fh.write(json.dumps(asdict(atom)) + "\n")
        with gzip.open(outputs[1], "wt", encoding="utf-8") as fh:
            for rel in parse_relations(files[1], vocabs, reports["MRREL"]):
                fh.write(json.dumps(asdict(rel)) + "\n")
        attributes = parse_attributes(files[2], files[3], reports["MRDEF"], reports["MRSTY"])
        with gzip.open(outputs[2], "wt", encoding="utf-8") as fh:
            json.dump(
                {
                    cui: {"definition": a.definition, "semantic_types": sorted(a.semantic_types)}
                    for cui, a in attributes.items()
                },
                fh,
            )
        report = {
            name: {
                "lines": r.lines,
                "parsed": r.parsed,
                "malformed": r.malformed,
                "filtered": r.filtered,
                "suppressed": r.suppressed,
                "self_loops": r.self_loops,
            }
            for name, r in reports.items()
        }
        with open(outputs[3], "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
        run.mark("ingest", fp, outputs)
    click.echo(
        "ingest: "
        + ", ".join(f"{n}={report[n]['parsed']}" for n in ("MRCONSO", "MRREL"))
        + f", attributes={len(attributes)}"
    )


def _load_ingested(run: RunDir, stage: str):
    from .rrf import AtomRecord, ConceptAttributes, RelationRecord

    ingest_dir = run.path / "ingest"
    atoms_path = run.require(stage, ingest_dir / "atoms.jsonl.gz")
    rel_path = run.require(stage, ingest_dir / "relations.jsonl.gz")
    attr_path = run.require(stage, ingest_dir / "attributes.json.gz")

    def atoms():
        with gzip.open(atoms_path, "rt", encoding="utf-8") as fh:
            for line in fh:
                yield AtomRecord(**json.loads(line))

    def relations():
        with gzip.open(rel_path, "rt", encoding="utf-8") as fh:
            for line in fh:
                yield RelationRecord(**json.loads(line))

    with gzip.open(attr_path, "rt", encoding="utf-8") as fh:
        raw = json.load(fh)
    attributes = {
        cui: ConceptAttributes(
            cui=cui, definition=v["definition"], semantic_types=set(v["semantic_types"])
        )
        for cui, v in raw.items()
    }
    return atoms(), relations(), attributes


# -- graph ------------------------------------------------------------------


@main.group()
def graph():
    """Concept graph build and statistics."""


@graph.command("build")
@click.pass_context
def graph_build(ctx):
    cfg = _cfg(ctx)
    run = RunDir(cfg.run_dir)
    ingest_dir = run.path / "ingest"
    inputs = [
        run.require("graph build", ingest_dir / "atoms.jsonl.gz"),
        run.require("graph build", ingest_dir / "relations.jsonl.gz"),
        run.require("graph build", ingest_dir / "attributes.json.gz"),
    ]
    fp = run.fingerprint(inputs, {})
    out = run.subdir("graph") / "graph.bin"
    if run.is_current("graph-build", fp):
        click.echo("graph build: up to date")
        return
    with run.lock():
        atoms, relations, attributes = _load_ingested(run, "graph build")
        g = build_graph(atoms, relations, attributes)
        save_graph(g, out)
        run.mark("graph-build", fp, [out])
    click.echo(
        f"graph build: {len(g.nodes)} nodes, {len(g.edges)} edges"
        f" ({g.dangling_dropped} dangling relations dropped) -> {out}"
    )


@graph.command("stats")
@click.option("--restricted", is_flag=True, help="Stats for the semantic-type restricted subgraph.")
@click.pass_context
def graph_stats_cmd(ctx, restricted):
    cfg = _cfg(ctx)
    run = RunDir(cfg.run_dir)
    snapshot = run.require("graph stats", run.path / "graph" / "graph.bin")
    g = load_graph(snapshot)
    if restricted:
        g = restrict_graph(g, cfg.semantic_types)
    stats = graph_stats(g)
    payload = json.dumps(stats.to_dict(), indent=2)
    (run.subdir("graph") / ("stats_restricted.json" if restricted else "stats.json")).write_text(
        payload + "\n", encoding="utf-8"
    )
    click.echo(payload)


# -- embed / index ----------------------------------------------------------


@main.command()
@click.pass_context
def embed(ctx):
    """Embed every restricted-graph node with the configured provider."""
    cfg = _cfg(ctx)
    run = RunDir(cfg.run_dir)
    snapshot = run.require("embed", run.path / "graph" / "graph.bin")
    provider = _embedding_provider(cfg)
    fp = run.fingerprint(
        [snapshot],
        {"provider": provider.name, "semantic_types": sorted(cfg.semantic_types)},
    )
    out_dir = run.subdir("embed")
    matrix_path = out_dir / "matrix.npy"
    cuis_path = out_dir / "cuis.json"
    if run.is_current("embed", fp):
        click.echo("embed: up to date")
        return
    with run.lock():
        g = restrict_graph(load_graph(snapshot), cfg.semantic_types)
        texts = [node_text(g.nodes[cui]) for cui in sorted(g.nodes)]
        cache = EmbeddingCache(out_dir / "cache.sqlite")
        matrix, cuis = embed_all(
            texts,
            provider,
            batch=cfg.embedding.batch_size,
            cache=cache,
            max_in_flight=cfg.embedding.max_in_flight,
        )
        cache.close()
        np.save(matrix_path, matrix)
        cuis_path.write_text(json.dumps(cuis), encoding="utf-8")
        run.mark("embed", fp, [matrix_path, cuis_path])
    click.echo(f"embed: {matrix.shape[0]} vectors of dimension {matrix.shape[1]}")


@main.group()
def index():
    """Vector index over node embeddings."""


@index.command("build")
@click.pass_context
def index_build(ctx):
    cfg = _cfg(ctx)
    run = RunDir(cfg.run_dir)
    matrix_path = run.require("index build", run.path / "embed" / "matrix.npy")
    cuis_path = run.require("index build", run.path / "embed" / "cuis.json")
    fp = run.fingerprint([matrix_path, cuis_path], {})
    out = run.subdir("index") / "index.bin"
    if run.is_current("index-build", fp):
        click.echo("index build: up to date")
        return
    with run.lock():
        matrix = np.load(matrix_path)
        cuis = json.loads(cuis_path.read_text(encoding="utf-8"))
        idx = VectorIndex(matrix, cuis)
        save_index(idx, out)
        run.mark("index-build", fp, [out])
    click.echo(f"index build: {len(idx)} rows -> {out}")


# -- retrieval --------------------------------------------------------------


def _targets_path(cfg: PipelineConfig) -> Path:
    if cfg.targets_file:
        return cfg.targets_file
    return cfg.rrf_dir / "targets.yaml"


def _load_pipeline_graph_index(cfg: PipelineConfig, run: RunDir, stage: str):
    snapshot = run.require(stage, run.path / "graph" / "graph.bin")
    index_path = run.require(stage, run.path / "index" / "index.bin")
    g = restrict_graph(load_graph(snapshot), cfg.semantic_types)
    idx = load_index(index_path)
    return g, idx


def _candidates_artifact(candidates, g) -> dict:
    members = []
    for m in candidates.members:
        node = g.nodes.get(m.cui)
        members.append(
            {
                "cui": m.cui,
                "name": node.preferred_name if node else "",
                "definition": node.definition if node else None,
                "semantic_types": sorted(node.semantic_types) if node else [],
                "distance": m.distance,
                "provenance": m.provenance,
            }
        )
    return {
        "target_id": candidates.target_id,
        "target_cui": candidates.target_cui,
        "config": candidates.config.to_dict(),
        "query_vector": [float(x) for x in candidates.query_vector],
        "members": members,
    }


def _apply_retrieval_overrides(cfg: PipelineConfig, k, hops, max_neighbours):
    if k is None and hops is None and max_neighbours is None:
        return
    old = cfg.retrieval
    cfg.retrieval = retrieval_mod.RetrievalConfig(
        k=k if k is not None else old.k,
        hops=hops if hops is not None else old.hops,
        max_neighbours=max_neighbours if max_neighbours is not None else old.max_neighbours,
        child_depth=old.child_depth,
        semantic_types=old.semantic_types,
    )


@main.command()
@click.option("--k", type=int, default=None)
@click.option("--hops", type=int, default=None)
@click.option("--max-neighbours", "max_neighbours", type=int, default=None)
@click.pass_context
def retrieve(ctx, k, hops, max_neighbours):
    """Retrieve candidate CUIs for every configured target concept."""
    cfg = _cfg(ctx)
    _apply_retrieval_overrides(cfg, k, hops, max_neighbours)
    run = RunDir(cfg.run_dir)
    targets_file = run.require("retrieve", _targets_path(cfg))
    g, idx = _load_pipeline_graph_index(cfg, run, "retrieve")
    provider = _embedding_provider(cfg)
    targets = retrieval_mod.load_targets(targets_file)
    out_dir = run.subdir("retrieve")
    fp = run.fingerprint(
        [targets_file, run.path / "index" / "index.bin"],
        {"retrieval": cfg.retrieval.to_dict(), "provider": provider.name},
    )
    if run.is_current("retrieve", fp):
        click.echo("retrieve: up to date")
        return
    outputs = []
    with run.lock():
        for target in targets:
            result = retrieval_mod.retrieve(g, idx, target, cfg.retrieval, provider)
            artifact = out_dir / f"{target.id}.candidates.json"
            artifact.write_text(
                json.dumps(_candidates_artifact(result, g), indent=2), encoding="utf-8"
            )
            retrieval_mod.write_candidates_csv(result, g, out_dir / f"{target.id}.candidates.csv")
            outputs.append(artifact)
            click.echo(f"retrieve: {target.id} -> {len(result)} candidates")
        run.mark("retrieve", fp, outputs)


@main.command()
@click.pass_context
def sweep(ctx):
    """Run the retrieval optimisation grid against the manual sets."""
    cfg = _cfg(ctx)
    run = RunDir(cfg.run_dir)
    targets_file = run.require("sweep", _targets_path(cfg))
    manual_dir = cfg.manual_dir or (cfg.rrf_dir / "manual")
    g, idx = _load_pipeline_graph_index(cfg, run, "sweep")
    provider = _embedding_provider(cfg)
    out_dir = run.subdir("sweep")
    grid = retrieval_mod.published_grid(
        semantic_types=cfg.retrieval.semantic_types, child_depth=cfg.retrieval.child_depth
    )
    for target in retrieval_mod.load_targets(targets_file):
        manual_path = run.require("sweep", manual_dir / f"{target.id}.csv")
        manual, _ = metrics_mod.load_concept_set_csv(manual_path)
        rows = retrieval_mod.sweep_configs(g, idx, target, grid, manual, provider)
        payload = [r.to_dict() for r in rows]
        (out_dir / f"{target.id}.sweep.json").write_text(
            json.dumps(payload, indent=2), encoding="utf-8"
        )
        click.echo(f"sweep: {target.id}")
        click.echo(f"  {'k':>5} {'hops':>4} {'cap':>5} {'retrieved':>9} {'recall':>7} chosen")
        for r in rows:
            click.echo(
                f"  {r.config.k:>5} {r.config.hops:>4} {r.config.max_neighbours:>5}"
                f" {r.retrieved:>9} {r.recall:>7.2f} {'*' if r.chosen else ''}"
            )


# -- curation ---------------------------------------------------------------


@main.command()
@click.option("--runs", type=int, default=None)
@click.option("--chunk-size", "chunk_size", type=int, default=None)
@click.option("--provider", default=None)
@click.pass_context
def curate(ctx, runs, chunk_size, provider):
    """Filter and classify retrieved candidates with the chat provider."""
    cfg = _cfg(ctx)
    if runs is not None:
        cfg.curation.n_runs = runs
    if chunk_size is not None:
        cfg.curation.chunk_size = chunk_size
    if provider:
        cfg.chat.provider = provider
    run = RunDir(cfg.run_dir)
    targets_file = run.require("curate", _targets_path(cfg))
    provider = _chat_provider(cfg)
    out_root = run.subdir("curate")
    for target in retrieval_mod.load_targets(targets_file):
        artifact = run.require("curate", run.path / "retrieve" / f"{target.id}.candidates.json")
        payload = json.loads(artifact.read_text(encoding="utf-8"))
        pairs = [(m["cui"], m["name"]) for m in payload["members"]]
        if target.target_cui is None:
            target.target_cui = payload["target_cui"]
        out_dir = out_root / target.id
        out_dir.mkdir(exist_ok=True)
        results = cur_mod.curate(
            pairs, target, provider, cfg.curation, log_dir=out_dir / "prompts"
        )
        for cur in results:
            (out_dir / f"run{cur.run_id:02d}.json").write_text(
                json.dumps(
                    {"curated": cur.to_dict(), "wall_time": cur.usage.wall_time}, indent=2
                ),
                encoding="utf-8",
            )
        click.echo(
            f"curate: {target.id} x{len(results)} runs,"
            f" selected {len(results[0].selected)} CUIs (run 1)"
        )


# -- evaluation ---------------------------------------------------------------


def _mean_sd(values: list[float | None]) -> dict:
    clean = [v for v in values if v is not None]
    if not clean:
        return {"mean": None, "sd": None}
    mean, sd = metrics_mod.run_variability(clean)
    return {"mean": mean, "sd": sd}


@main.command()
@click.pass_context
def evaluate(ctx):
    """Score retrieval, curation runs, and the manual benchmark."""
    cfg = _cfg(ctx)
    run = RunDir(cfg.run_dir)
    targets_file = run.require("evaluate", _targets_path(cfg))
    manual_dir = cfg.manual_dir or (cfg.rrf_dir / "manual")
    gold_dir = cfg.gold_dir or (cfg.rrf_dir / "gold")
    report: dict = {"targets": {}}
    lines: list[str] = []
    for target in retrieval_mod.load_targets(targets_file):
        artifact = run.require("evaluate", run.path / "retrieve" / f"{target.id}.candidates.json")
        payload = json.loads(artifact.read_text(encoding="utf-8"))
        retrieved = {m["cui"] for m in payload["members"]}
        manual, _ = metrics_mod.load_concept_set_csv(
            run.require("evaluate", manual_dir / f"{target.id}.csv")
        )
        gold, gold_classes = metrics_mod.load_concept_set_csv(
            run.require("evaluate", gold_dir / f"{target.id}.csv")
        )
        entry: dict = {
            "retrieval": metrics_mod.retrieval_recall(manual, retrieved).to_dict(),
            "manual": metrics_mod.manual_recall(manual, gold).to_dict(),
        }

        run_files = sorted((run.path / "curate" / target.id).glob("run*.json"))
        filter_runs, class_runs = [], []
        for path in run_files:
            data = json.loads(path.read_text(encoding="utf-8"))["curated"]
            predicted = set(data["selected"])
            filter_runs.append(
                metrics_mod.llm_filter_metrics(predicted, gold, retrieved).to_dict()
            )
            pred_map = {c: "definitive" for c in data["definitive"]}
            pred_map.update({c: "context_dependent" for c in data["context_dependent"]})
            try:
                class_runs.append(
                    metrics_mod.classification_report(pred_map, gold_classes).to_dict()
                )
            except metrics_mod.UndefinedMetricError:
                class_runs.append(None)
        entry["filter_runs"] = filter_runs
        entry["filter_summary"] = {
            key: _mean_sd([r[key] for r in filter_runs]) for key in ("recall", "precision", "f1")
        }
        entry["classification_runs"] = class_runs
        defined = [r for r in class_runs if r]
        entry["classification_summary"] = {
            f"macro_{key}": _mean_sd([r["macro"][key] for r in defined])
            for key in ("recall", "precision", "f1")
        }
        report["targets"][target.id] = entry

        lines.append(f"{target.id}")
        r = entry["retrieval"]
        lines.append(
            f"  retrieval   recall={_fmt(r['recall'])} precision={_fmt(r['precision'])} f1={_fmt(r['f1'])}"
        )
        lines.append(f"  manual      recall={_fmt(entry['manual']['recall'])}")
        fs = entry["filter_summary"]
        if filter_runs:
            lines.append(
                "  llm filter  "
                + " ".join(
                    f"{key}={_fmt(fs[key]['mean'])}±{_fmt(fs[key]['sd'])}"
                    for key in ("recall", "precision", "f1")
                )
                + f"  ({len(filter_runs)} runs)"
            )
        cs = entry["classification_summary"]
        if defined:
            lines.append(
                "  llm classes "
                + " ".join(
                    f"{key.replace('macro_', '')}={_fmt(cs[key]['mean'])}±{_fmt(cs[key]['sd'])}"
                    for key in ("macro_recall", "macro_precision", "macro_f1")
                )
            )

    out_dir = run.subdir("evaluate")
    (out_dir / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    table = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    click.echo(table.rstrip())


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}"


# -- review service -----------------------------------------------------------


@main.group()
def review():
    """Clinician review service."""


@review.command("serve")
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--ui-dir", type=click.Path(), default=None, help="Static UI bundle to serve at /.")
@click.pass_context
def review_serve(ctx, host, port, ui_dir):
    import uvicorn

    cfg = _cfg(ctx)
    run = RunDir(cfg.run_dir)
    store = ReviewStore(run.path)
    loaded = store.load_candidate_artifacts()
    if loaded == 0:
        raise click.ClickException(
            "no candidate artifacts found; run the retrieve stage first"
        )
    replayed = store.replay()
    auth = AuthConfig(
        annotator_tokens=cfg.review.annotator_tokens,
        resolver_token=cfg.review.resolver_token,
        resolver_id=cfg.review.resolver_id,
    )
    if not auth.annotator_tokens:
        raise click.ClickException("review.annotator_tokens must be configured")
    default_ui = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    ui_path = Path(ui_dir) if ui_dir else (default_ui if default_ui.is_dir() else None)
    app = create_app(store, auth, ui_dir=ui_path)
    click.echo(
        f"review serve: {loaded} concepts, {replayed} events replayed,"
        f" listening on {host or cfg.review.host}:{port or cfg.review.port}"
    )
    uvicorn.run(app, host=host or cfg.review.host, port=port or cfg.review.port, log_level="warning")


def entrypoint(argv=None):
    try:
        main(args=argv, standalone_mode=True)
    except CuisetError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    entrypoint()
