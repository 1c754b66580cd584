from asyncflow.exceptions import UsageError
from asyncflow.experiments import (
    EvaluationContext,
    best_deviation,
    build_async,
    constant_deviation_search,
    load_frozen_field,
    load_trained_tpm,
)
from asyncflow.reporting import line_chart, write_csv
from asyncflow.sampler import constant_deviation

from ._base import AsyncflowCommand


class Command(AsyncflowCommand):
    help = "Evaluate a trained TPM across deviation scales gamma and plot each metric against gamma"
    output_name = "sweep"

    def add_command_arguments(self, parser):
        self.add_checkpoint_arguments(parser)
        parser.add_argument("--gammas", type=float, nargs="+", help="Override sweep.gammas")
        parser.add_argument("--lifted-tpm-checkpoint", help="TPM trained under the lifted bound (adds a 2r row)")
        parser.add_argument("--degradation", action="store_true",
                            help="Also grid-search the best constant deviation and evaluate 4x past it")

    def run(self, config, /, **options):
        gammas = options.get("gammas") or config.sweep.gammas
        if not gammas:
            raise UsageError("the gamma list is empty")
        field = load_frozen_field(config, self.field_checkpoint(config, options))
        tpm_path = self.tpm_checkpoint(config, options)
        tpm = load_trained_tpm(config, tpm_path)
        lifted_path = options.get("lifted_tpm_checkpoint")
        lifted = load_trained_tpm(config, lifted_path) if lifted_path else None
        context = EvaluationContext(config, field)
        names = list(context.spec.names)

        rows = []
        for seed in config.sweep.seeds:
            for gamma in gammas:
                evaluation = context.run_async(tpm, build_async(config, gamma=gamma), seed=seed, knob=gamma)
                rows.append({"variant": "standard", "gamma": gamma, "seed": seed, **evaluation.summary()})
            if lifted is not None:
                cfg = build_async(config, gamma=1.0, bound="lifted")
                evaluation = context.run_async(lifted, cfg, seed=seed, knob=1.0)
                rows.append({"variant": "lifted", "gamma": 1.0, "seed": seed, **evaluation.summary()})

        out = self.output_dir(config, tpm_path, lifted_path, gammas, options.get("degradation"))
        write_csv(out / "sweep.csv", ["variant", "gamma", "seed", "composite", *names, "mean_deviation"], rows)
        for metric in ["composite", *names, "mean_deviation"]:
            series = {
                f"seed {seed}": [(r["gamma"], r[metric]) for r in rows
                                 if r["seed"] == seed and r["variant"] == "standard"]
                for seed in config.sweep.seeds
            }
            line_chart(out / f"sweep_{metric}.svg", series, f"{metric} vs deviation scale", "gamma", metric)

        if options.get("degradation"):
            search = constant_deviation_search(context, config.oracle.deviations(), progress=self.progress)
            d_star, best = best_deviation(search)
            policy, cfg = constant_deviation(4.0 * d_star, build_async(config, gamma=1.0))
            far = context.run_async(policy, cfg, knob=4.0 * d_star).mean_composite
            write_csv(out / "oracle_grid.csv", ["deviation", "composite"],
                      [{"deviation": d, "composite": c} for d, c in search])
            write_csv(out / "degradation.csv", ["deviation", "composite"],
                      [{"deviation": d_star, "composite": best}, {"deviation": 4.0 * d_star, "composite": far}])
            style = self.style.SUCCESS if far < best else self.style.WARNING
            self.stdout.write(style(f"best constant deviation {d_star:+.2f}: {best:+.6f}; at 4x: {far:+.6f}"))

        self.stdout.write(self.style.SUCCESS(f"Swept {len(gammas)} gammas over {len(config.sweep.seeds)} seeds -> {out}"))
