"""Budget-driven training runs for the seven method configurations.

Every run draws its learning rate (and the drop schedule) from the
consumed-budget fraction, charges each iteration to the clock at the
profile's reference cost, and stops when the next full step no longer
fits. Validation passes are measurement, never charged. One iteration may
overshoot the budget by at most its own cost.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .clock import BudgetClock, CalibrationProfile, StepKind
from .data import (Corpus, MaskedBatch, WindowDataset, bundled_corpus_path,
                   fixed_validation_set, load_and_tokenize, sample_masked_batch,
                   split_rho)
from .model import (DESK_CONFIG, LayerPlan, ModelConfig, ModelParams,
                    forward_mlm, init_model, stack_model)
from .optim import (NumericalInstabilityError, OptHyper, OptimizerState,
                    adamw_step, clip_gradients, gnb_estimate,
                    hessian_refresh_due, lion_step, sophia_step)
from .schedules import (DropSchedule, ScheduleSpec, drop_keep_probs, lr_at,
                        sample_layer_plan, stacking_points)
from .selection import SelectionConfig, SelectiveBackprop, ProxyLossTable, rho_precompute, rho_select

METHODS = ("baseline", "stacking", "dropping", "selective_backprop",
           "rho", "lion", "sophia")

# Deterministic mask universe for the fixed-window dataset; must not vary
# with the run seed or the proxy loss table would not transfer.
RHO_MASK_SEED = 777

PLOT_COLUMNS = ("rst_elapsed", "step", "lr", "train_loss", "val_loss",
                "active_layers", "selected_fraction")


@dataclass
class RunConfig:
    method: str
    budget_rst: float
    seed: int = 0
    model: ModelConfig = DESK_CONFIG
    schedule: ScheduleSpec = ScheduleSpec("one_cycle", 1e-3)
    opt: OptHyper = field(default_factory=OptHyper)
    batch_size: int = 8
    mask_rate: float = 0.15
    # stacking
    stack_fractions: tuple = (0.125, 0.30)
    stack_k: int = 2
    # dropping
    drop_alpha_bar: float = 0.5
    drop_gamma_f: float = 100.0
    # selective backprop
    sb_beta: float = 1.0
    sb_history: int = 1024
    # shared by batch-selection methods: mega-batch = factor * mini-batch
    mega_factor: int = 1
    # rho
    rho_fractions: tuple = (0.20, 0.01, 0.79)
    proxy_budget_frac: float = 0.25
    proxy_depth_div: int = 2
    proxy_table_path: str | None = None
    # accounting ablations
    free_selection: bool = False
    free_hessian: bool = False
    # evaluation
    eval_interval: float | None = None   # None -> budget / 8
    eval_batches: int = 4
    val_fraction: float = 0.05
    val_seed: int = 9001
    # data regime
    max_train_tokens: int | None = None  # truncate to force the multi-epoch regime
    schedule_budget: float | None = None  # stretch the decay horizon (pitfall demo)
    corpus_path: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.budget_rst < 0:
            raise ValueError("budget must be non-negative")
        if self.mega_factor < 1:
            raise ValueError("mega_factor must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        if "model" in doc and isinstance(doc["model"], dict):
            doc["model"] = ModelConfig(**doc["model"])
        if "schedule" in doc and isinstance(doc["schedule"], dict):
            doc["schedule"] = ScheduleSpec(**doc["schedule"])
        if "opt" in doc and isinstance(doc["opt"], dict):
            doc["opt"] = OptHyper(**doc["opt"])
        for key in ("stack_fractions", "rho_fractions"):
            if key in doc and doc[key] is not None:
                doc[key] = tuple(doc[key])
        return cls(**doc)


# Tuned defaults per method. Schedule peaks and decay values follow the
# published recipes; the one-cycle shape is shared so only the optimizer
# and its peak vary across methods.
def make_run_config(method: str, budget_rst: float, seed: int = 0,
                    corpus_path: str | None = None, **overrides) -> RunConfig:
    base: dict = {"method": method, "budget_rst": budget_rst, "seed": seed,
                  "corpus_path": corpus_path}
    if method == "lion":
        base["schedule"] = ScheduleSpec("one_cycle", 7e-4)
        base["opt"] = OptHyper(beta1=0.9, beta2=0.99, weight_decay=0.1)
    elif method == "sophia":
        base["schedule"] = ScheduleSpec("one_cycle", 4e-4)
        base["opt"] = OptHyper(beta1=0.965, beta2=0.99, weight_decay=0.015,
                               rho=0.01, k=10)
    else:
        base["schedule"] = ScheduleSpec("one_cycle", 1e-3)
        base["opt"] = OptHyper()  # AdamW: b1 0.9, b2 0.98, eps 1e-12, wd 0.01
    if method == "rho":
        base["mega_factor"] = 2
    base.update(overrides)
    return RunConfig(**base)


# Named variants beyond the seven canonical presets.
PRESET_VARIANTS = {
    # gentler drop temperature with a halved peak, for spiky architectures
    "dropping_t5": ("dropping", {"drop_gamma_f": 20.0,
                                 "schedule": ScheduleSpec("one_cycle", 5e-4)}),
    # uncounted selection with the large candidate pool
    "rho_free10": ("rho", {"free_selection": True, "mega_factor": 10}),
}


@dataclass
class RunResult:
    config: RunConfig
    records: list[dict]
    summary: dict
    params: ModelParams
    clock: BudgetClock


_corpus_cache: dict[str, Corpus] = {}


def get_corpus(path=None) -> Corpus:
    path = str(path) if path else str(bundled_corpus_path())
    if path not in _corpus_cache:
        _corpus_cache[path] = load_and_tokenize(path)
    return _corpus_cache[path]


def run_experiment(cfg: RunConfig, profile: CalibrationProfile,
                   corpus: Corpus | None = None) -> RunResult:
    """Run one budgeted training configuration to exhaustion."""
    if corpus is None:
        corpus = get_corpus(cfg.corpus_path)
    profile = profile.normalized()

    if cfg.method == "rho":
        proxy_train, proxy_val, main = split_rho(corpus, cfg.rho_fractions)
        train_c, val_c = _train_val_split(main, cfg.val_fraction)
        rho_ctx = _prepare_rho(cfg, profile, proxy_train, proxy_val, train_c)
    else:
        train_c, val_c = _train_val_split(corpus, cfg.val_fraction)
        rho_ctx = None

    runner = _Runner(cfg, profile, train_c, val_c, corpus.vocab_size, rho_ctx)
    return runner.run()


def _train_val_split(corpus: Corpus, val_fraction: float):
    n_val = max(int(len(corpus) * val_fraction), 1)
    split = len(corpus) - n_val
    if split <= 0:
        raise ValueError("corpus too small for the requested validation fraction")
    return corpus.slice(0, split), corpus.slice(split, len(corpus))


def _prepare_rho(cfg, profile, proxy_train, proxy_val, train_c):
    """Train (or load) the proxy and precompute its per-example loss table.

    Neither phase is charged to the main budget; the costs amortize across
    runs that reuse the table.
    """
    seq = cfg.model.seq_len
    depth = cfg.model.num_layers // cfg.proxy_depth_div
    dataset = WindowDataset(_truncate(train_c.tokens, cfg.max_train_tokens), seq,
                            vocab_size=proxy_train.vocab_size,
                            mask_rate=cfg.mask_rate, mask_seed=RHO_MASK_SEED)

    if cfg.proxy_table_path and Path(cfg.proxy_table_path).exists():
        table = ProxyLossTable.load(cfg.proxy_table_path, expected_size=len(dataset))
        return dataset, table

    proxy_cfg = dataclasses.replace(
        cfg, method="baseline", budget_rst=cfg.budget_rst * cfg.proxy_budget_frac,
        model=dataclasses.replace(cfg.model, num_layers=depth),
        schedule_budget=None, max_train_tokens=None, proxy_table_path=None)
    proxy_run = _Runner(proxy_cfg, profile, proxy_train, proxy_val,
                        proxy_train.vocab_size, None).run()
    table = rho_precompute(proxy_run.params, dataset)
    if cfg.proxy_table_path:
        table.save(cfg.proxy_table_path)
    return dataset, table


def _truncate(tokens: np.ndarray, limit: int | None) -> np.ndarray:
    return tokens if limit is None else tokens[:limit]


class _Runner:
    def __init__(self, cfg: RunConfig, profile: CalibrationProfile,
                 train_c: Corpus, val_c: Corpus, vocab_size: int, rho_ctx):
        self.cfg = cfg
        self.profile = profile
        self.vocab = vocab_size
        self.train_tokens = _truncate(train_c.tokens, cfg.max_train_tokens)
        self.val_tokens = val_c.tokens
        self.rho_ctx = rho_ctx

        self.model_cfg = dataclasses.replace(cfg.model, vocab_size=vocab_size)
        ss = np.random.SeedSequence(cfg.seed).spawn(4)
        self.rng_init, self.rng_data, self.rng_method, self.rng_gnb = \
            (np.random.default_rng(s) for s in ss)

        init_layers = self.model_cfg.num_layers
        self.stack_events: list[float] = []
        if cfg.method == "stacking":
            if self.model_cfg.num_layers % (2 ** cfg.stack_k) != 0:
                raise ValueError(
                    f"num_layers {self.model_cfg.num_layers} not divisible by 2^{cfg.stack_k}")
            init_layers //= 2 ** cfg.stack_k
            self.stack_events = stacking_points(cfg.budget_rst, cfg.stack_fractions)
        self.params = init_model(
            dataclasses.replace(self.model_cfg, num_layers=init_layers), self.rng_init)
        self.state = OptimizerState.for_params(self.params)

        self.clock = BudgetClock(cfg.budget_rst)
        self.schedule_horizon = cfg.schedule_budget or cfg.budget_rst
        self.drop_sched = DropSchedule(cfg.drop_alpha_bar, cfg.drop_gamma_f,
                                       self.model_cfg.num_layers)
        self.selector = SelectiveBackprop(
            SelectionConfig(beta=cfg.sb_beta, mega_batch=cfg.batch_size * cfg.mega_factor,
                            mini_batch=cfg.batch_size, free_selection=cfg.free_selection),
            history_size=cfg.sb_history)

        self.val_set = fixed_validation_set(
            self.val_tokens, cfg.eval_batches, cfg.batch_size,
            self.model_cfg.seq_len, cfg.val_seed, vocab_size) if cfg.eval_batches else []

        self.records: list[dict] = []
        self.steps = 0
        self.tokens_seen = 0
        self.last = {"lr": 0.0, "train_loss": None,
                     "active_layers": init_layers, "selected_fraction": 1.0}

    # -- helpers -----------------------------------------------------------

    def _progress(self) -> float:
        return min(self.clock.consumed / self.schedule_horizon, 1.0)

    def _lr(self) -> float:
        return lr_at(self.cfg.schedule, self._progress())

    def _next_step_fits(self) -> bool:
        cost = self.profile.charge_time(StepKind.FULL_STEP, self.params.n_layers)
        return self.clock.consumed + cost <= self.clock.budget

    def _epoch(self) -> float:
        return self.tokens_seen / len(self.train_tokens)

    def _sample_batch(self, batch_size: int) -> MaskedBatch:
        batch = sample_masked_batch(self.train_tokens, batch_size,
                                    self.model_cfg.seq_len, self.cfg.mask_rate,
                                    self.rng_data, self.vocab)
        self.tokens_seen += batch_size * self.model_cfg.seq_len
        return batch

    def _grads(self, tape, loss) -> dict[str, np.ndarray]:
        named = self.params.named_parameters()
        by_tid = T.backward(tape, loss, [p for _, p in named])
        grads = {name: by_tid[p.tid] for name, p in named}
        grads, _ = clip_gradients(grads, self.cfg.opt.clip_norm)
        return grads

    def _update(self, batch: MaskedBatch, plan: LayerPlan | None,
                selected_fraction: float) -> None:
        lr = self._lr()
        tape = T.Tape()
        loss, _ = forward_mlm(tape, self.params, batch, plan)
        grads = self._grads(tape, loss)

        method = self.cfg.method
        if method == "lion":
            lion_step(self.state, self.params, grads, self.cfg.opt, lr)
        elif method == "sophia":
            due = hessian_refresh_due(self.state.t + 1, self.cfg.opt.k)
            fresh = gnb_estimate(self.params, batch, self.rng_gnb) if due else None
            sophia_step(self.state, self.params, grads, self.cfg.opt, lr, fresh)
        else:
            adamw_step(self.state, self.params, grads, self.cfg.opt, lr)

        active = plan.active_layers if plan is not None else self.params.n_layers
        self.clock.charge(self.profile, StepKind.FULL_STEP, active)
        if method == "sophia" and due:
            self.clock.charge(self.profile, StepKind.HESSIAN_STEP,
                              self.params.n_layers, free=self.cfg.free_hessian)

        self.steps += 1
        self.last = {"lr": lr, "train_loss": float(loss.data),
                     "active_layers": active, "selected_fraction": selected_fraction}
        self.records.append({"event": "step", "step": self.steps,
                             "rst_elapsed": self.clock.consumed,
                             "epoch": self._epoch(), **self.last})

    def _eval_loss(self) -> float | None:
        if not self.val_set:
            return None
        losses = [float(forward_mlm(None, self.params, vb)[0].data)
                  for vb in self.val_set]
        return float(np.mean(losses))

    def _record_eval(self, val_loss: float | None) -> None:
        if val_loss is None:
            return
        self.records.append({"event": "eval", "step": self.steps,
                             "rst_elapsed": self.clock.consumed,
                             "epoch": self._epoch(), "val_loss": val_loss,
                             **self.last})

    # -- method iterations ---------------------------------------------------

    def _pre_iteration(self) -> None:
        # Depth-doubling events fire on budget crossings, before the cost
        # pre-check so the post-stack depth is what gets priced.
        while self.stack_events and self.clock.consumed >= self.stack_events[0]:
            self.params, self.state = stack_model(self.params, self.state)
            self.stack_events.pop(0)

    def _iter_plain(self) -> None:
        batch = self._sample_batch(self.cfg.batch_size)
        self._update(batch, None, 1.0)

    def _iter_dropping(self) -> None:
        probs = drop_keep_probs(self.drop_sched, self._progress())
        plan = sample_layer_plan(probs, self.rng_method)
        batch = self._sample_batch(self.cfg.batch_size)
        self._update(batch, plan, 1.0)

    def _iter_selective_backprop(self) -> None:
        mega_b = self.cfg.batch_size * self.cfg.mega_factor
        mega = self._sample_batch(mega_b)
        _, per_example = forward_mlm(None, self.params, mega)
        self.clock.charge(self.profile, StepKind.FORWARD_ONLY, self.params.n_layers,
                          scale=float(self.cfg.mega_factor), free=self.cfg.free_selection)
        rows = [(mega.input_ids[j], mega.targets[j], mega.mask[j]) for j in range(mega_b)]
        before = self.selector.pending
        batches = self.selector.offer(rows, per_example, self.rng_method)
        admitted = sum(len(b) for b in batches) + self.selector.pending - before
        frac = admitted / mega_b
        for rows_batch in batches:
            if self.clock.consumed + self.profile.charge_time(
                    StepKind.FULL_STEP, self.params.n_layers) > self.clock.budget:
                return  # pending work at exhaustion is discarded
            batch = MaskedBatch(np.stack([r[0] for r in rows_batch]),
                                np.stack([r[1] for r in rows_batch]),
                                np.stack([r[2] for r in rows_batch]))
            self._update(batch, None, frac)

    def _iter_rho(self) -> None:
        dataset, table = self.rho_ctx
        mega_b = self.cfg.batch_size * self.cfg.mega_factor
        ids = self.rng_method.choice(len(dataset), size=mega_b, replace=False)
        mega = dataset.batch_of(ids)
        self.tokens_seen += mega_b * self.model_cfg.seq_len
        _, per_example = forward_mlm(None, self.params, mega)
        self.clock.charge(self.profile, StepKind.FORWARD_ONLY, self.params.n_layers,
                          scale=float(self.cfg.mega_factor), free=self.cfg.free_selection)
        sel = rho_select(per_example, table[ids], self.cfg.batch_size)
        batch = MaskedBatch(mega.input_ids[sel], mega.targets[sel], mega.mask[sel])
        self._update(batch, None, self.cfg.batch_size / mega_b)

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunResult:
        iters = {"baseline": self._iter_plain, "lion": self._iter_plain,
                 "sophia": self._iter_plain, "stacking": self._iter_plain,
                 "dropping": self._iter_dropping,
                 "selective_backprop": self._iter_selective_backprop,
                 "rho": self._iter_rho}[self.cfg.method]
        interval = self.cfg.eval_interval or (self.cfg.budget_rst / 8 or None)
        next_eval = interval if interval else float("inf")

        initial_val = self._eval_loss()
        self._record_eval(initial_val)
        status = "ok"
        aborted_step = None
        try:
            while not self.clock.exhausted:
                self._pre_iteration()
                if not self._next_step_fits():
                    break
                iters()
                while self.clock.consumed >= next_eval:
                    self._record_eval(self._eval_loss())
                    next_eval += interval
        except NumericalInstabilityError as err:
            status = "aborted"
            aborted_step = err.step

        final_val = self._eval_loss()
        self._record_eval(final_val)
        summary = {
            "method": self.cfg.method, "seed": self.cfg.seed,
            "budget_rst": self.cfg.budget_rst, "steps": self.steps,
            "epochs": self._epoch(), "consumed_rst": self.clock.consumed,
            "final_train_loss": self._final_train_loss(),
            "final_val_loss": final_val, "initial_val_loss": initial_val,
            "vocab_size": self.vocab, "status": status,
        }
        if aborted_step is not None:
            summary["aborted_step"] = aborted_step
        return RunResult(self.cfg, self.records, summary, self.params, self.clock)

    def _final_train_loss(self) -> float | None:
        # mean over the last 5% of steps (min 1): single-minibatch losses are
        # too noisy at this scale to compare runs on one draw
        losses = [r["train_loss"] for r in self.records if r["event"] == "step"]
        if not losses:
            return None
        tail = max(len(losses) // 20, 1)
        return float(np.mean(losses[-tail:]))


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

def run_dir_name(cfg: RunConfig) -> str:
    return f"{cfg.method}_{cfg.budget_rst:g}_{cfg.seed}"

def write_run_dir(result: RunResult, root, force: bool = False) -> Path:
    out = Path(root) / run_dir_name(result.config)
    if out.exists() and (out / "summary.json").exists() and not force:
        raise FileExistsError(f"run directory {out} exists; use force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(result.config.to_dict(), indent=2))
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec) + "\n")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2))
    return out


def read_run_dir(path) -> tuple[RunConfig, list[dict], dict]:
    path = Path(path)
    cfg = RunConfig.from_dict(json.loads((path / "config.json").read_text()))
    records = [json.loads(line) for line in
               (path / "metrics.jsonl").read_text().splitlines() if line]
    summary = json.loads((path / "summary.json").read_text())
    return cfg, records, summary


# ---------------------------------------------------------------------------
# comparison reports
# ---------------------------------------------------------------------------

def compare(summaries: list[dict], metric: str = "final_val_loss"):
    """Aggregate summaries into a (method x budget) table of mean +- std.

    Returns (text_report, csv_rows). Sample std uses n-1; single-seed cells
    report 0.00 with a footnote marker. The best (lowest-mean) cell per
    budget column is bracketed.
    """
    if not summaries:
        raise ValueError("no run summaries to compare")
    cells: dict[tuple[str, float], list[float]] = {}
    for s in summaries:
        value = s.get(metric)
        if value is None:
            raise ValueError(f"summary for {s.get('method')} lacks metric {metric!r}")
        cells.setdefault((s["method"], float(s["budget_rst"])), []).append(float(value))

    budgets = sorted({b for _, b in cells})
    methods = sorted({m for m, _ in cells}, key=lambda m: METHODS.index(m) if m in METHODS else 99)
    best = {b: min(float(np.mean(v)) for (m2, b2), v in cells.items() if b2 == b)
            for b in budgets}

    csv_rows = [("method", "budget_rst", "n_seeds", "mean", "std", "best")]
    single_seed = False
    lines = [" " * 20 + "".join(f"{f'{b:g} RST-s':>22}" for b in budgets)]
    for m in methods:
        row = f"{m:<20}"
        for b in budgets:
            vals = cells.get((m, b))
            if vals is None:
                row += f"{'-':>22}"
                continue
            mean = float(np.mean(vals))
            std = statistics.stdev(vals) if len(vals) > 1 else 0.0
            mark = "" if len(vals) > 1 else "*"
            single_seed = single_seed or len(vals) == 1
            is_best = abs(mean - best[b]) < 1e-12
            cell = f"{mean:.4f} ± {std:.2f}{mark}"
            row += f"{'[' + cell + ']' if is_best else cell:>22}"
            csv_rows.append((m, b, len(vals), repr(mean), repr(std), int(is_best)))
        lines.append(row)
    if single_seed:
        lines.append("* single seed: std shown as 0.00 by convention")
    return "\n".join(lines), csv_rows


def write_compare_report(summaries: list[dict], out_prefix,
                         metric: str = "final_val_loss") -> tuple[Path, Path]:
    text, rows = compare(summaries, metric)
    out_prefix = Path(out_prefix)
    txt_path = out_prefix.with_suffix(".txt")
    csv_path = out_prefix.with_suffix(".csv")
    txt_path.write_text(text + "\n")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)
    return txt_path, csv_path


# ---------------------------------------------------------------------------
# pitfall demonstration: decayed-over-T vs decayed-over-2T, both measured at T
# ---------------------------------------------------------------------------

def pitfall_demo(base_cfg: RunConfig, profile: CalibrationProfile,
                 corpus: Corpus | None = None) -> dict:
    budget = base_cfg.budget_rst
    decayed_cfg = dataclasses.replace(base_cfg, method="baseline", schedule_budget=None)
    stretched_cfg = dataclasses.replace(base_cfg, method="baseline",
                                        schedule_budget=2.0 * budget)
    decayed = run_experiment(decayed_cfg, profile, corpus)
    stretched = run_experiment(stretched_cfg, profile, corpus)
    return {
        "decayed": decayed,
        "stretched": stretched,
        "schedule_lr_at_budget_decayed": lr_at(base_cfg.schedule, 1.0),
        "schedule_lr_at_budget_stretched": lr_at(base_cfg.schedule, 0.5),
    }


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def emit_plot_data(records: list[dict], path) -> Path:
    """One CSV row per metrics record; val_loss blank when absent."""
    if not records:
        raise ValueError("no records to emit")
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOT_COLUMNS)
        for rec in records:
            train = rec["train_loss"]
            writer.writerow([
                repr(float(rec["rst_elapsed"])), rec["step"],
                repr(float(rec["lr"])), "" if train is None else repr(float(train)),
                repr(float(rec["val_loss"])) if "val_loss" in rec else "",
                rec["active_layers"], repr(float(rec["selected_fraction"])),
            ])
    return path


def read_plot_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            rows.append({
                "rst_elapsed": float(raw["rst_elapsed"]),
                "step": int(raw["step"]),
                "lr": float(raw["lr"]),
                "train_loss": float(raw["train_loss"]) if raw["train_loss"] else None,
                "val_loss": float(raw["val_loss"]) if raw["val_loss"] else None,
                "active_layers": int(raw["active_layers"]),
                "selected_fraction": float(raw["selected_fraction"]),
            })
    return rows
