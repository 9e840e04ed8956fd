"""Stage orchestration: ingest, run-agents, build-features, train, evaluate.

Stages communicate only through files under the run's working directory, so
every stage is resumable and a rerun with unchanged inputs rewrites
byte-identical artifacts. Training and evaluation refuse to run until the
cache fully covers the records they consume.
"""

from __future__ import annotations

import hashlib
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .agents import (
    AgentSpec,
    ChatCompletionsClient,
    DecodingConfig,
    expected_cache_keys,
    run_agent,
)
from .config import RunConfig
from .domain import (
    LENS_ORDER,
    AgentOutput,
    ConfidenceSource,
    DisclosureRecord,
    Lens,
    Split,
    SplitAssignment,
    target_from_return,
)
from .evaluation import EvalReport, evaluate_split, write_report
from .features import build_features, read_feature_file, write_feature_file
from .ingest import (
    chronological_split,
    load_corpus,
    load_split,
    parse_rfc3339,
    preprocess_corpus,
    sort_records,
    write_split,
)
from .meta import MetaModel, train_meta_model
from .store import CacheKey, CacheStore, make_record
from .synth import generate_corpus, load_latents, stub_agent, write_latents
from . import ingest as ingest_mod


class MissingArtifactError(RuntimeError):
    """A prerequisite stage output does not exist yet."""


class StaleModelError(RuntimeError):
    """The model was trained on different prompts than the current run uses."""


class CoverageError(RuntimeError):
    """The cache does not cover every (disclosure, agent) pair a stage needs."""

    def __init__(self, missing: Sequence[CacheKey]):
        self.missing = list(missing)
        preview = ", ".join(
            f"{k.disclosure_id}/{k.lens.value}" for k in self.missing[:10]
        )
        suffix = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(
            f"cache is missing {len(self.missing)} agent outputs: {preview}{suffix}"
        )


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} missing: {path} (run the earlier stage first)")
    return path


def stage_synth(config: RunConfig, n: int, seed: int) -> dict:
    """Write a synthetic corpus and its latent sidecar."""
    if config.latents_path is None:
        raise ValueError("config needs latents_path to hold the synthetic signals")
    records, latents = generate_corpus(n, seed)
    ingest_mod.write_corpus(records, config.corpus_path)
    write_latents(latents, config.latents_path)
    positives = sum(r.binary_target for r in records)
    return {"n": n, "seed": seed, "positive_rate": positives / n}


def stage_ingest(config: RunConfig) -> dict:
    """Load the corpus, preprocess, split chronologically, persist both."""
    _require(config.corpus_path, "corpus file")
    records = load_corpus(config.corpus_path)
    prepared = preprocess_corpus(records, config.preprocess)
    assignment = chronological_split(prepared, config.split_fractions)
    _write_prepared(prepared, config.prepared_path)
    write_split(assignment, config.split_path)
    counts = assignment.counts()
    return {
        "records": len(prepared),
        "train": counts[Split.TRAIN],
        "dev": counts[Split.DEV],
        "test": counts[Split.TEST],
    }


def _write_prepared(records: Sequence[DisclosureRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in sort_records(records):
            fh.write(
                json.dumps(
                    {
                        "id": r.id,
                        "timestamp": r.timestamp.isoformat(),
                        "ticker": r.ticker,
                        "text": r.raw_text,
                        "clean_text": r.clean_text,
                        "next_day_return": r.next_day_return,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_prepared(path: str | Path) -> list[DisclosureRecord]:
    records: list[DisclosureRecord] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            records.append(
                DisclosureRecord(
                    id=obj["id"],
                    timestamp=parse_rfc3339(obj["timestamp"]),
                    ticker=obj["ticker"],
                    raw_text=obj["text"],
                    clean_text=obj["clean_text"],
                    next_day_return=obj["next_day_return"],
                    binary_target=target_from_return(obj["next_day_return"]),
                )
            )
    return records


def _prepared_records(config: RunConfig) -> list[DisclosureRecord]:
    _require(config.prepared_path, "preprocessed corpus")
    return load_prepared(config.prepared_path)


def _split_assignment(config: RunConfig) -> SplitAssignment:
    _require(config.split_path, "split file")
    return load_split(config.split_path)


def _pairs(
    records: Sequence[DisclosureRecord], specs: Sequence[AgentSpec], decoding: DecodingConfig
) -> list[tuple[DisclosureRecord, AgentSpec, CacheKey]]:
    keys = expected_cache_keys(records, specs, decoding)
    combos = [(record, spec) for record in records for spec in specs]
    return [(record, spec, key) for (record, spec), key in zip(combos, keys)]


def stage_run_agents(config: RunConfig, split_path: Path | None = None) -> dict:
    """Populate the cache for every (disclosure, agent) pair not yet stored.

    Resumable: pairs whose key is already cached are skipped. Stub agents run
    inline; HTTP agents run through a bounded thread pool, with results
    funneled to the single cache appender in deterministic submission order.
    """
    records = _prepared_records(config)
    if split_path is not None:
        wanted = set(load_split(split_path).partition)
        records = [r for r in records if r.id in wanted]
    specs = config.agent_specs()
    decoding = config.decoding()
    pairs = _pairs(records, specs, decoding)

    latents = None
    if config.stub.enabled:
        _require(config.latents_path, "latents sidecar")
        latents = load_latents(config.latents_path)

    fetched = 0
    fallbacks = 0
    with CacheStore(config.cache_path) as store:
        todo = [(record, spec, key) for record, spec, key in pairs if key not in store]
        cached = len(pairs) - len(todo)
        if latents is not None:
            for record, spec, _key in todo:
                output = stub_agent(
                    spec.lens,
                    record,
                    latents,
                    noise=config.stub.noise_for(spec.lens),
                    run_seed=decoding.seed,
                )
                store.put(make_record(output))
                fetched += 1
        elif todo:
            local = threading.local()

            def _call(task: tuple[DisclosureRecord, AgentSpec, CacheKey]) -> AgentOutput:
                record, spec, _ = task
                clients = getattr(local, "clients", None)
                if clients is None:
                    clients = local.clients = {}
                client_key = (spec.endpoint_url, spec.model_name)
                client = clients.get(client_key)
                if client is None:
                    client = clients[client_key] = ChatCompletionsClient(
                        spec.endpoint_url, spec.model_name
                    )
                return run_agent(
                    spec, decoding, record, client=client, allow_extra_keys=config.allow_extra_keys
                )

            with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
                for output in pool.map(_call, todo):
                    store.put(make_record(output))
                    fetched += 1
                    if output.confidence_source is ConfidenceSource.FALLBACK:
                        fallbacks += 1
                    if fetched % 256 == 0:
                        store.sync()
        store.sync()
        still_missing = len(store.missing(key for _, _, key in pairs))

    return {
        "pairs": len(pairs),
        "already_cached": cached,
        "fetched": fetched,
        "fallbacks": fallbacks,
        "missing": still_missing,
    }


def _coverage_or_raise(
    store: CacheStore,
    records: Sequence[DisclosureRecord],
    specs: Sequence[AgentSpec],
    decoding: DecodingConfig,
) -> None:
    missing = store.missing(expected_cache_keys(records, specs, decoding))
    if missing:
        raise CoverageError(missing)


def outputs_for_records(
    store: CacheStore,
    records: Sequence[DisclosureRecord],
    specs: Sequence[AgentSpec],
    decoding: DecodingConfig,
) -> dict[str, dict[Lens, AgentOutput]]:
    """Pull each record's three cached outputs; raises CoverageError on gaps."""
    result: dict[str, dict[Lens, AgentOutput]] = {}
    missing: list[CacheKey] = []
    for record, spec, key in _pairs(records, specs, decoding):
        cached = store.get(key)
        if cached is None:
            missing.append(key)
            continue
        result.setdefault(record.id, {})[spec.lens] = cached.output
    if missing:
        raise CoverageError(missing)
    return result


def _records_for_split(
    records: Sequence[DisclosureRecord], assignment: SplitAssignment, split: Split
) -> list[DisclosureRecord]:
    by_id = {r.id: r for r in records}
    unknown = [rid for rid in assignment.partition if rid not in by_id]
    if unknown:
        raise ValueError(f"split references unknown ids, e.g. {unknown[:3]}")
    unassigned = [rid for rid in by_id if rid not in assignment.partition]
    if unassigned:
        raise ValueError(
            f"split does not cover the corpus (stale split file?), "
            f"e.g. {unassigned[:3]}"
        )
    return [by_id[rid] for rid in assignment.ids_for(split)]


def stage_build_features(config: RunConfig) -> dict:
    """Export one audit feature file per split, in sorted split order."""
    records = _prepared_records(config)
    assignment = _split_assignment(config)
    specs = config.agent_specs()
    decoding = config.decoding()
    _require(config.cache_path, "agent cache")
    counts = {}
    with CacheStore(config.cache_path) as store:
        outputs = outputs_for_records(store, records, specs, decoding)
    for split in (Split.TRAIN, Split.DEV, Split.TEST):
        split_records = _records_for_split(records, assignment, split)
        rows = [
            (
                r.id,
                build_features([outputs[r.id][lens] for lens in LENS_ORDER]),
                r.binary_target,
            )
            for r in split_records
        ]
        write_feature_file(config.features_path(split), rows)
        counts[split.value] = len(rows)
    return counts


def _feature_matrix(path: Path) -> tuple[np.ndarray, np.ndarray]:
    rows = read_feature_file(path)
    X = np.array([fv.as_list() for _, fv, _ in rows], dtype=np.float64)
    y = np.array([target for _, _, target in rows], dtype=int)
    return X, y


def _train_prompt_digest(
    records: Sequence[DisclosureRecord], specs: Sequence[AgentSpec], decoding: DecodingConfig
) -> str:
    hashes = sorted(
        key.prompt_hash for key in expected_cache_keys(records, specs, decoding)
    )
    return hashlib.sha256("\n".join(hashes).encode("ascii")).hexdigest()


def stage_train(config: RunConfig) -> dict:
    """Tune C on dev, fit the aggregator on train, persist the model file.

    Refuses to run unless the cache covers the train and dev splits: all
    model outputs must exist before the aggregator learns from any of them.
    """
    records = _prepared_records(config)
    assignment = _split_assignment(config)
    specs = config.agent_specs()
    decoding = config.decoding()
    _require(config.cache_path, "agent cache")
    train_records = _records_for_split(records, assignment, Split.TRAIN)
    dev_records = _records_for_split(records, assignment, Split.DEV)
    with CacheStore(config.cache_path) as store:
        _coverage_or_raise(store, train_records + dev_records, specs, decoding)

    for split in (Split.TRAIN, Split.DEV):
        _require(config.features_path(split), f"{split.value} feature file")
    X_train, y_train = _feature_matrix(config.features_path(Split.TRAIN))
    X_dev, y_dev = _feature_matrix(config.features_path(Split.DEV))

    model, dev_scores = train_meta_model(
        (X_train, y_train),
        (X_dev, y_dev),
        grid=config.train.grid,
        tol=config.train.tol,
        max_iter=config.train.max_iter,
        prompt_hash_digest=_train_prompt_digest(train_records, specs, decoding),
        n_outputs=3 * len(train_records),
    )
    model.save(config.model_path)
    return {
        "chosen_C": model.inverse_reg_strength,
        "dev_balanced_accuracy": dev_scores,
        "iterations": model.optimizer_report.iterations,
        "final_gradient_norm": model.optimizer_report.final_gradient_norm,
    }


def stage_evaluate(config: RunConfig) -> EvalReport:
    """Score every method on the test split and write both report files.

    The model file's prompt digest is checked against the prompts the current
    config would render, so a model trained before a prompt or preprocessing
    change cannot be silently scored against mismatched agent outputs.
    """
    records = _prepared_records(config)
    assignment = _split_assignment(config)
    specs = config.agent_specs()
    decoding = config.decoding()
    _require(config.cache_path, "agent cache")
    _require(config.model_path, "model file")
    model = MetaModel.load(config.model_path)
    if model.prompt_hash_digest:
        train_records = _records_for_split(records, assignment, Split.TRAIN)
        expected = _train_prompt_digest(train_records, specs, decoding)
        if model.prompt_hash_digest != expected:
            raise StaleModelError(
                f"{config.model_path} was trained under different prompts or "
                "preprocessing than this run; re-run the train stage"
            )
    test_records = _records_for_split(records, assignment, Split.TEST)
    with CacheStore(config.cache_path) as store:
        outputs = outputs_for_records(store, test_records, specs, decoding)
    report = evaluate_split(
        test_records,
        outputs,
        model,
        delta=config.eval.delta,
        sensitivity_deltas=config.eval.sensitivity_deltas,
    )
    write_report(report, config.report_json_path, config.report_text_path)
    return report


def stage_report(config: RunConfig, fmt: str) -> str:
    """Re-emit the persisted report in the requested format."""
    if fmt == "json":
        return _require(config.report_json_path, "report file").read_text(encoding="utf-8")
    if fmt == "text":
        return _require(config.report_text_path, "report file").read_text(encoding="utf-8")
    raise ValueError(f"unknown report format {fmt!r} (expected text or json)")
