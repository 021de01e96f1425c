"""
Command-line surface for the sliced attention toolkit.
Subcommands: forward, bench, gradcheck, cpd, expressivity, heatmap.
"""

import argparse
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .bench_service import IMPLS, BenchmarkService
from .config import DTYPES, VARIANTS, Config, RunConfig
from .diagnostics import GridSpec, kernel_heatmap, relu_energy_identity_check, run_cpd_trials, write_heatmap_csv
from .errors import ConfigurationError
from .expressivity import GammaParams, SequenceGroup, compose_gamma, gamma_lambda, match_sequences
from .gradients import (
    check_attention_gradients,
    head_backward,
    random_gradcheck_instance,
)
from .kernel_core import multi_head_layer
from .params import HeadParams, Projection, random_head, random_tokens
from .reference_oracle import naive_forward
from .utils.io import load_params, load_tokens, save_tokens, write_json

logger = logging.getLogger(__name__)


def _int_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _name_list(text: str) -> List[str]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    unknown = [name for name in names if name not in IMPLS]
    if not names or unknown:
        raise argparse.ArgumentTypeError(f"implementations must be drawn from {', '.join(IMPLS)}")
    return names


def _point(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",")]
    except ValueError:
        values = []
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected a point 'x,y', got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per operation and the shared kernel flags."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--variant", choices=VARIANTS, default="relu", help="attention kernel")
    common.add_argument("--bandwidth", type=float, default=Config.DEFAULT_BANDWIDTH, help="bump half-width b")
    common.add_argument("--epsilon", type=float, default=None, help="denominator floor (default per dtype)")
    common.add_argument("--no-centering", action="store_true", help="skip value centering for relu")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default SLICED_ATTN_SEED or 0)")
    common.add_argument("--dtype", choices=DTYPES, default="f64", help="floating point precision")
    common.add_argument("--threads", type=int, default=Config.THREADS, help="worker threads for heads")
    common.add_argument("--input", type=Path, default=None, help="token file (JSON or CSV)")
    common.add_argument("--params", type=Path, default=None, help="head parameter file (JSON)")
    common.add_argument("--output", type=Path, default=None, help="report path")
    common.add_argument("--verbose", action="store_true", help="log progress at INFO level")

    parser = argparse.ArgumentParser(prog="sliced-attn", description="Sliced ReLU attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    forward = sub.add_parser("forward", parents=[common], help="run a multi-head attention layer")
    forward.add_argument("--impl", choices=("sliced", "naive"), default="sliced", help="sorted scan or dense oracle")
    forward.add_argument("--residual", action="store_true", help="add the input tokens to the output")
    forward.add_argument("--heads", type=int, default=1, help="random heads when --params is absent")

    bench = sub.add_parser("bench", parents=[common], help="time sliced and dense kernels")
    bench.add_argument("--n-grid", type=_int_list, default=[256, 512, 1024, 2048], help="comma-separated n")
    bench.add_argument("--d", type=int, default=16, help="token dimension")
    bench.add_argument("--heads", type=int, default=1, help="heads per layer")
    bench.add_argument("--impls", type=_name_list, default=["sliced_relu", "naive_relu"], help="implementations")
    bench.add_argument("--reps", type=int, default=Config.BENCH_REPS, help="timed repetitions (>= 3)")
    bench.add_argument("--warmup", type=int, default=Config.BENCH_WARMUP, help="untimed warm-up runs")
    bench.add_argument("--force-naive", action="store_true", help="allow dense runs above the cap")

    grad = sub.add_parser("gradcheck", parents=[common], help="verify analytic gradients")
    grad.add_argument("--n", type=int, default=16, help="tokens in the random instance")
    grad.add_argument("--d", type=int, default=4, help="token dimension of the random instance")
    grad.add_argument("--directions", type=int, default=Config.GRADCHECK_DIRECTIONS, help="perturbations")
    grad.add_argument("--step", type=float, default=Config.GRADCHECK_STEP, help="finite-difference step h")
    grad.add_argument("--mode", choices=("directions", "coordinates"), default="directions")

    cpd = sub.add_parser("cpd", parents=[common], help="check the ReLU kernel quadratic form")
    cpd.add_argument("--trials", type=int, default=Config.CPD_TRIALS, help="random trials")
    cpd.add_argument("--pairs", type=int, default=1_000_000, help="pairs for the Energy-Distance identity")

    expr = sub.add_parser("expressivity", parents=[common], help="build a sequence matching plan")
    expr.add_argument("--p", type=int, default=2, help="number of sequences")
    expr.add_argument("--n", type=int, default=3, help="tokens per sequence")
    expr.add_argument("--d", type=int, default=2, help="token dimension")
    expr.add_argument("--draws", type=int, default=Config.DIRECTION_DRAWS, help="direction draws before giving up")

    heat = sub.add_parser("heatmap", parents=[common], help="kernel weight field on a 2-D lattice")
    heat.add_argument("--nx", type=int, default=41, help="lattice columns")
    heat.add_argument("--ny", type=int, default=41, help="lattice rows")
    heat.add_argument("--extent", type=float, default=2.0, help="half-width of the square lattice")
    heat.add_argument("--query", type=_point, default=None, help="query point 'x,y' (default origin)")
    heat.add_argument("--normalize", action="store_true", help="apply the attention normalisation")
    return parser


class SlicedAttentionCLI:
    """Handlers behind each subcommand. Each returns 0 on success and 1 on a failed property check."""

    def __init__(self, args: argparse.Namespace):
        """
        Initialize handlers from parsed arguments.

        Args:
            args: namespace produced by :func:`build_parser`
        """
        self.args = args
        self.run_config = RunConfig(
            seed=Config.resolve_seed(args.seed),
            epsilon=args.epsilon,
            bandwidth=args.bandwidth,
            centering=False if args.no_centering else None,
            dtype=args.dtype,
            variant=args.variant,
            threads=args.threads,
        )
        self.rng = self.run_config.rng()

    def run(self) -> int:
        handler = getattr(self, f"handle_{self.args.command}")
        return handler()

    def _output(self, default: str) -> Path:
        return self.args.output if self.args.output is not None else Path(default)

    def _heads(self, d: int, count: int = 1) -> List[HeadParams]:
        if self.args.params is not None:
            return load_params(self.args.params)
        kind = "linear" if self.args.variant == "bump" else "mlp1"
        return [random_head(d, self.rng, kind=kind, mixer=count > 1) for _ in range(count)]

    def handle_forward(self) -> int:
        if self.args.input is None:
            raise ConfigurationError("cli", "forward needs --input")
        if self.args.heads < 1:
            raise ConfigurationError("cli", f"--heads must be >= 1, got {self.args.heads}")
        seq = load_tokens(self.args.input)
        heads = self._heads(seq.d, self.args.heads)
        cfg = self.run_config.kernel_config()
        variant = self.args.variant
        if self.args.impl == "sliced":
            out = multi_head_layer(seq, heads, cfg, variant, threads=self.args.threads,
                                   residual=self.args.residual).data
        else:
            naive = naive_forward(variant)
            out = seq.data.astype(cfg.np_dtype) if self.args.residual else np.zeros_like(seq.data, dtype=cfg.np_dtype)
            for head in heads:
                out = out + (naive(seq, head, cfg) @ head.mixer.T).astype(cfg.np_dtype)
        path = save_tokens(self._output(Config.DEFAULT_OUTPUT), out)
        print(f"✅ {self.args.impl} {variant} attention over {seq.n} tokens written to {path}")
        return 0

    def handle_bench(self) -> int:
        service = BenchmarkService(reps=self.args.reps, warmup=self.args.warmup, threads=self.args.threads,
                                   force_naive=self.args.force_naive, seed=self.run_config.seed,
                                   dtype=self.args.dtype, bandwidth=self.args.bandwidth)
        records = service.run(self.args.n_grid, self.args.d, self.args.heads, self.args.impls)
        csv_path = service.write_csv(records, self._output(Config.DEFAULT_BENCH_OUTPUT))
        summary = service.write_summary(records, csv_path.with_suffix(".json"))
        for record in records:
            print(f"   {record.impl:<14} n={record.n:<8} {record.median_ms:10.3f} ms")
        print(f"✅ benchmark written to {csv_path} (summary {summary})")
        return 0

    def handle_gradcheck(self) -> int:
        variant = self.args.variant
        if self.args.input is not None:
            seq = load_tokens(self.args.input)
            head = self._heads(seq.d)[0]
        else:
            seq, head = random_gradcheck_instance(self.args.n, self.args.d, self.rng, variant,
                                                  bandwidth=self.args.bandwidth)
        cfg = self.run_config.kernel_config()
        upstream = self.rng.normal(size=seq.data.shape)
        report = check_attention_gradients(seq, head, cfg, variant, upstream=upstream, h=self.args.step,
                                           directions=self.args.directions, seed=self.run_config.seed,
                                           mode=self.args.mode)
        sliced = head_backward(variant)(seq, head, cfg, upstream).flatten()
        dense = head_backward(variant, dense=True)(seq, head, cfg, upstream).flatten()
        dense_gap = float(np.abs(sliced - dense).max() / max(np.abs(dense).max(), 1.0))
        passed = report.passed and dense_gap <= Config.BENCH_GATE_TOLERANCE
        payload = dict(report.to_dict(), variant=variant, dense_rel_diff=dense_gap, passed=passed)
        path = write_json(self._output(Config.DEFAULT_OUTPUT), payload)
        status = "✅" if passed else "❌"
        print(f"{status} gradcheck {variant}: max relative error {report.max_rel_error:.3e} ({path})")
        return 0 if passed else 1

    def handle_cpd(self) -> int:
        report = run_cpd_trials(self.args.trials, self.rng)
        identity = relu_energy_identity_check(self.rng.normal(size=(self.args.pairs, 2)))
        passed = report.passed and identity == 0.0
        payload = dict(report.to_dict(), identity_max_error=identity, passed=passed)
        path = write_json(self._output(Config.DEFAULT_OUTPUT), payload)
        status = "✅" if passed else "❌"
        print(f"{status} cpd: min form {report.min_form:.3e} over {report.trials} trials ({path})")
        return 0 if passed else 1

    def handle_expressivity(self) -> int:
        p, n, d = self.args.p, self.args.n, self.args.d
        if min(p, n, d) < 1:
            raise ConfigurationError("cli", "--p, --n and --d must be positive")
        sources = SequenceGroup.from_array(self.rng.normal(size=(p, n, d)))
        targets = SequenceGroup.from_array(self.rng.normal(size=(p, n, d)))
        plan = match_sequences(sources, targets, self.rng, self.args.draws)

        tokens = random_tokens(n, d, self.rng)
        lam = GammaParams(self.rng.normal(size=d), float(self.rng.normal()), float(self.rng.normal()),
                          float(self.rng.normal()))
        points = self.rng.normal(size=(8, d))
        want = gamma_lambda(points, tokens, lam)
        # mixed absolute and relative error, as in assert_allclose with rtol = atol
        gamma_error = float((np.abs(compose_gamma(points, tokens, lam) - want) / (1.0 + np.abs(want))).max())

        passed = plan.passed and gamma_error <= Config.GAMMA_TOLERANCE
        payload = dict(plan.to_dict(), p=p, n=n, d=d, gamma_max_error=gamma_error, passed=passed)
        path = write_json(self._output(Config.DEFAULT_OUTPUT), payload)
        status = "✅" if passed else "❌"
        print(f"{status} matched {p} sequences with {plan.layer_count} layers (bound {plan.bound}), "
              f"max error {plan.max_error:.3e} ({path})")
        return 0 if passed else 1

    def handle_heatmap(self) -> int:
        extent = self.args.extent
        if not extent > 0:
            raise ConfigurationError("cli", f"--extent must be > 0, got {extent}")
        if self.args.params is not None:
            head = load_params(self.args.params)[0]
            proj, index = head.projection, head.head_index
        else:
            kind = "linear" if self.args.variant == "bump" else "mlp1"
            proj, index = Projection.random(2, self.rng, kind=kind), 0
        grid = GridSpec(-extent, extent, -extent, extent, self.args.nx, self.args.ny)
        field = kernel_heatmap(proj, grid, self.args.variant, self.args.bandwidth, self.args.query, index,
                               self.args.normalize, self.run_config.kernel_config().eps)
        path = write_heatmap_csv(field, self._output(Config.DEFAULT_HEATMAP_OUTPUT))
        print(f"✅ {self.args.variant} heatmap on a {grid.nx}x{grid.ny} lattice written to {path}")
        return 0


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and dispatch; errors propagate to the caller."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        Config.configure_logging("INFO")
    return SlicedAttentionCLI(args).run()
