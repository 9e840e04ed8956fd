"""Single-file JSON run configuration.

One config holds endpoints, decoding, preprocessing, tuning grid, regime
delta, and artifact paths, so archiving that one file (plus the corpus and
cache) reproduces a run end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .agents import AgentSpec, DecodingConfig
from .domain import LENS_ORDER, Lens, Split
from .ingest import PreprocessConfig
from .synth import DEFAULT_STUB_NOISE, STUB_ENDPOINT, STUB_MODEL_NAME


@dataclass(frozen=True)
class StubConfig:
    """Stub agents read hidden latents instead of calling an endpoint.

    ``noise`` may be one scale for all lenses or one per lens; unset means
    the tuned per-lens defaults from the synthetic generator.
    """

    enabled: bool = False
    noise: tuple[float, float, float] | None = None

    def noise_for(self, lens: Lens) -> float:
        if self.noise is None:
            return DEFAULT_STUB_NOISE[lens]
        return self.noise[LENS_ORDER.index(lens)]


@dataclass(frozen=True)
class TrainConfig:
    grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    tol: float = 1e-8
    max_iter: int = 1000


@dataclass(frozen=True)
class EvalConfig:
    delta: float = 0.1
    sensitivity_deltas: tuple[float, ...] = (0.05, 0.1, 0.2)


@dataclass(frozen=True)
class RunConfig:
    workdir: Path
    corpus_path: Path
    seed: int = 42
    preprocess: PreprocessConfig = field(
        default_factory=lambda: PreprocessConfig(max_tokens=2048)
    )
    max_output_tokens: int = 128
    agents: tuple[AgentSpec, ...] = ()
    stub: StubConfig = field(default_factory=StubConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    max_in_flight: int = 4
    allow_extra_keys: bool = False
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    latents_path: Path | None = None

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if not self.stub.enabled:
            if len(self.agents) != len(LENS_ORDER):
                raise ValueError("config must name exactly one agent per lens (or enable stubs)")
            lenses = {spec.lens for spec in self.agents}
            if lenses != set(LENS_ORDER):
                raise ValueError(f"agents must cover every lens exactly once, got {sorted(l.value for l in lenses)}")
        if self.stub.enabled and self.latents_path is None:
            raise ValueError("stub agents need a latents_path")

    # Artifact layout under the working directory.
    @property
    def prepared_path(self) -> Path:
        return self.workdir / "prepared.jsonl"

    @property
    def split_path(self) -> Path:
        return self.workdir / "split.json"

    @property
    def cache_path(self) -> Path:
        return self.workdir / "cache.jsonl"

    def features_path(self, split: Split) -> Path:
        return self.workdir / f"features_{split.value}.jsonl"

    @property
    def model_path(self) -> Path:
        return self.workdir / "model.json"

    @property
    def report_json_path(self) -> Path:
        return self.workdir / "report.json"

    @property
    def report_text_path(self) -> Path:
        return self.workdir / "report.txt"

    def decoding(self) -> DecodingConfig:
        return DecodingConfig(seed=self.seed, max_output_tokens=self.max_output_tokens)

    def agent_specs(self) -> tuple[AgentSpec, ...]:
        if self.stub.enabled:
            return tuple(
                AgentSpec(
                    lens=lens,
                    model_name=STUB_MODEL_NAME,
                    endpoint_url=STUB_ENDPOINT,
                    supports_logprobs=False,
                )
                for lens in LENS_ORDER
            )
        return tuple(sorted(self.agents, key=lambda s: LENS_ORDER.index(s.lens)))


def _stub_noise(value: object) -> tuple[float, float, float] | None:
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return (float(value),) * 3
    if isinstance(value, dict):
        return tuple(float(value[lens.value]) for lens in LENS_ORDER)
    raise ValueError(f"stub noise must be a number or per-lens object, got {value!r}")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}") from None

    base = path.parent

    def _resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else base / candidate

    try:
        agents = tuple(
            AgentSpec(
                lens=Lens(a["lens"]),
                model_name=a["model_name"],
                endpoint_url=a["endpoint_url"],
                supports_logprobs=bool(a.get("supports_logprobs", False)),
            )
            for a in raw.get("agents", [])
        )
        pre = raw.get("preprocess", {})
        stub = raw.get("stub_agents", {})
        train = raw.get("train", {})
        ev = raw.get("eval", {})
        return RunConfig(
            workdir=_resolve(raw["workdir"]),
            corpus_path=_resolve(raw["corpus_path"]),
            seed=int(raw.get("seed", 42)),
            preprocess=PreprocessConfig(
                max_tokens=int(pre.get("max_tokens", 2048)),
                chars_per_token=float(pre.get("chars_per_token", 4.0)),
            ),
            max_output_tokens=int(raw.get("max_output_tokens", 128)),
            agents=agents,
            stub=StubConfig(
                enabled=bool(stub.get("enabled", False)),
                noise=_stub_noise(stub.get("noise")),
            ),
            train=TrainConfig(
                grid=tuple(float(c) for c in train.get("grid", TrainConfig.grid)),
                tol=float(train.get("tol", TrainConfig.tol)),
                max_iter=int(train.get("max_iter", TrainConfig.max_iter)),
            ),
            eval=EvalConfig(
                delta=float(ev.get("delta", EvalConfig.delta)),
                sensitivity_deltas=tuple(
                    float(d) for d in ev.get("sensitivity_deltas", EvalConfig.sensitivity_deltas)
                ),
            ),
            max_in_flight=int(raw.get("max_in_flight", 4)),
            allow_extra_keys=bool(raw.get("allow_extra_keys", False)),
            split_fractions=tuple(
                float(f) for f in raw.get("split_fractions", (0.6, 0.2, 0.2))
            ),
            latents_path=_resolve(raw["latents_path"]) if "latents_path" in raw else None,
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: bad or missing config field: {exc}") from None
