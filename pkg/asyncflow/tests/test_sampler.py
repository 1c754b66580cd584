import math
import unittest

import numpy as np
import torch

from asyncflow import rng as rngs
from asyncflow.exceptions import ConfigurationError, DomainError, NumericError, UsageError
from asyncflow.flowcore import AnalyticField, Condition, GaussianMixture, make_time_grid
from asyncflow.kernel import DTYPE
from asyncflow.sampler import (
    AsyncConfig,
    cfg_combine,
    check_batch_termination,
    constant_deviation,
    mean_deviation,
    pseudo_timestep,
    sample_alternative,
    sample_async,
    sample_sync,
)
from asyncflow.tpm import ConstantRatioPolicy

from .factories import analytic_field, point_mixture, small_learned_field, small_tpm


def vec(*values):
    return torch.tensor(values, dtype=DTYPE)


class ExplodingField:
    """Velocity field that fails below a time threshold."""

    dim = 2

    def __init__(self, below):
        self.below = below

    def __call__(self, x, t, condition):
        if float(t) < self.below:
            raise NumericError("field blew up")
        return torch.zeros_like(x)


class GuidanceTests(unittest.TestCase):
    """Classifier-free guidance combination"""

    def test_examples(self):
        """Documented combinations"""
        self.assertTrue(torch.equal(cfg_combine(vec(1.0, 0.0), vec(0.0, 0.0), 5.0), vec(5.0, 0.0)))
        self.assertTrue(torch.equal(cfg_combine(vec(2.0), vec(1.0), 0.0), vec(1.0)))
        self.assertTrue(torch.equal(cfg_combine(vec(2.0), vec(1.0), 1.0), vec(2.0)))

    def test_linear_in_guidance(self):
        """The combination is affine in the guidance scale"""
        c, u = vec(0.3, -1.2), vec(2.0, 0.5)
        a, b = cfg_combine(c, u, 2.0), cfg_combine(c, u, 4.0)
        self.assertTrue(torch.allclose(cfg_combine(c, u, 3.0), 0.5 * (a + b), atol=1e-14, rtol=0))

    def test_shape_mismatch(self):
        """Velocities of different shapes are refused"""
        with self.assertRaises(ConfigurationError):
            cfg_combine(vec(1.0), vec(1.0, 2.0), 1.0)


class PseudoTimestepTests(unittest.TestCase):
    """Placement of the conditioning time"""

    def setUp(self):
        self.standard = AsyncConfig(gamma=1.0)
        self.lifted = AsyncConfig(gamma=1.0, bound="lifted")

    def test_half_ratio_is_grid_point(self):
        """r=0.5 under the standard bound returns the next grid time bitwise"""
        self.assertEqual(pseudo_timestep(0.5, 0.4, 0.5, self.standard), 0.4)
        self.assertEqual(pseudo_timestep(0.7, 0.6, 0.5, self.lifted), 0.6)

    def test_standard_examples(self):
        """r=1 overshoots by half an interval, r=0 undershoots by half"""
        self.assertAlmostEqual(pseudo_timestep(0.5, 0.4, 1.0, self.standard), 0.35, delta=1e-15)
        self.assertAlmostEqual(pseudo_timestep(0.5, 0.4, 0.0, self.standard), 0.45, delta=1e-15)

    def test_lifted_examples(self):
        """The lifted bound doubles the reach"""
        self.assertAlmostEqual(pseudo_timestep(0.5, 0.4, 1.0, self.lifted), 0.3, delta=1e-15)
        self.assertAlmostEqual(pseudo_timestep(0.5, 0.4, 0.0, self.lifted), 0.5, delta=1e-15)

    def test_zero_gamma(self):
        """gamma=0 always returns the next grid time"""
        cfg = AsyncConfig(gamma=0.0)
        for r in (0.0, 0.3, 1.0):
            self.assertEqual(pseudo_timestep(0.5, 0.4, r, cfg), 0.4)

    def test_clamped_at_floor(self):
        """Overshooting past zero clamps to sigma_min"""
        self.assertEqual(pseudo_timestep(0.1, 0.0, 1.0, self.lifted), self.lifted.sigma_min)

    def test_rejects_bad_inputs(self):
        """Non-decreasing grid pairs and ratios outside [0, 1] are refused"""
        with self.assertRaises(DomainError):
            pseudo_timestep(0.4, 0.5, 0.5, self.standard)
        with self.assertRaises(DomainError):
            pseudo_timestep(0.5, 0.4, 1.2, self.standard)

    def test_config_validation(self):
        """Unknown bounds and negative scales are configuration errors"""
        with self.assertRaises(ConfigurationError):
            AsyncConfig(bound="loose")
        with self.assertRaises(ConfigurationError):
            AsyncConfig(gamma=-1.0)


class SyncSamplerTests(unittest.TestCase):
    """Plain Euler with guidance"""

    def test_single_step_point_target(self):
        """One step on a point target lands on the point"""
        field = AnalyticField(point_mixture())
        traj = sample_sync(field, make_time_grid(1), Condition(1), 1.0, rngs.stream(0, "sync"))
        self.assertTrue(torch.allclose(traj.sample, vec(1.5, -0.5), atol=1e-12, rtol=0))

    def test_determinism(self):
        """Same stream gives a bitwise-identical sample"""
        field, grid = analytic_field(), make_time_grid(10)
        a = sample_sync(field, grid, Condition(0), 5.0, rngs.stream(3, "sync"))
        b = sample_sync(field, grid, Condition(0), 5.0, rngs.stream(3, "sync"))
        self.assertTrue(torch.equal(a.sample, b.sample))

    def test_first_order_convergence(self):
        """Halving the step size roughly halves the error"""
        field = AnalyticField(GaussianMixture.isotropic([1.0], [[1.0, -0.5]], [0.5]))
        seeds = range(8)

        def endpoint(steps, seed):
            return sample_sync(field, make_time_grid(steps), Condition(0), 1.0, rngs.stream(seed, "order")).sample

        exact = [endpoint(4096, seed) for seed in seeds]

        def error(steps):
            return np.mean([torch.linalg.norm(endpoint(steps, s) - exact[s]).item() for s in seeds])

        ratio = error(16) / error(32)
        self.assertGreater(ratio, 1.6)
        self.assertLess(ratio, 2.4)

    def test_errors_name_the_step(self):
        """Field failures surface with their step index"""
        with self.assertRaisesRegex(NumericError, "step 6"):
            sample_sync(ExplodingField(below=0.5), make_time_grid(10), Condition(0), 1.0, rngs.stream(0, "boom"))


class AsyncSamplerTests(unittest.TestCase):
    """TPM-driven conditioning times"""

    def setUp(self):
        self.grid = make_time_grid(10)
        self.cfg = AsyncConfig(gamma=1.0, stochastic=False)

    def test_pinned_ratio_reproduces_sync(self):
        """r pinned at 0.5 gives bitwise-identical samples to the synchronous sampler"""
        field = small_learned_field(seed=1)
        policy = ConstantRatioPolicy(0.5)
        for i in range(100):
            condition = Condition(i % 2)
            sync = sample_sync(field, self.grid, condition, 5.0, rngs.stream(11, "eq", i))
            asyn = sample_async(field, policy, self.grid, condition, 5.0, self.cfg, rngs.stream(11, "eq", i))
            self.assertTrue(torch.equal(sync.sample, asyn.sample))

    def test_zero_gamma_reproduces_sync(self):
        """gamma=0 with a random stochastic TPM matches the synchronous sampler bitwise"""
        field = small_learned_field(seed=2)
        tpm, _ = small_tpm(seed=2, randomize_readout=True)
        cfg = AsyncConfig(gamma=0.0, stochastic=True)
        for i in range(100):
            condition = Condition(i % 2)
            sync = sample_sync(field, self.grid, condition, 5.0, rngs.stream(12, "eq", i))
            asyn = sample_async(field, tpm, self.grid, condition, 5.0, cfg, rngs.stream(12, "eq", i))
            self.assertTrue(torch.equal(sync.sample, asyn.sample))

    def test_saturated_readout_in_mode(self):
        """A readout pushing beta to exactly 1 still gives an interior mode and a finite log-density"""
        tpm, _ = small_tpm(seed=7)
        with torch.no_grad():
            tpm.readout.bias.copy_(vec(3.0, -40.0))
        traj = sample_async(analytic_field(), tpm, self.grid, Condition(0), 5.0, self.cfg, rngs.stream(7, "sat"))
        self.assertEqual(len(traj.steps), 10)
        for step in traj.steps:
            self.assertTrue(0.0 < step.r < 1.0)
            self.assertTrue(math.isfinite(step.log_prob))

    def test_latent_follows_input_grid(self):
        """Each update uses the grid interval whatever the conditioning time"""
        tpm, _ = small_tpm(seed=4, randomize_readout=True)
        cfg = AsyncConfig(gamma=1.0, bound="lifted", stochastic=True)
        traj = sample_async(analytic_field(), tpm, self.grid, Condition(1), 5.0, cfg, rngs.stream(4, "grid"))
        for step in traj.steps:
            self.assertTrue(torch.equal(step.x_after, step.x_before + (step.t_next - step.t_k) * step.velocity))

    def test_conditioning_time_chain(self):
        """Each step is conditioned on the previous step's pseudo-timestep"""
        tpm, _ = small_tpm(seed=5, randomize_readout=True)
        traj = sample_async(analytic_field(), tpm, self.grid, Condition(0), 5.0,
                            AsyncConfig(stochastic=True), rngs.stream(5, "chain"))
        self.assertEqual(traj.steps[0].t_star, 1.0)
        for prev, step in zip(traj.steps, traj.steps[1:]):
            self.assertEqual(step.t_star, prev.t_star_next)
        self.assertEqual(traj.final_t_star, traj.steps[-1].t_star_next)

    def test_deviation_within_bound(self):
        """Recorded deviations stay within gamma/2 and t* never drops below sigma_min"""
        tpm, _ = small_tpm(seed=6, randomize_readout=True)
        cfg = AsyncConfig(gamma=1.0, stochastic=True)
        for i in range(10):
            traj = sample_async(analytic_field(), tpm, self.grid, Condition(i % 2), 5.0, cfg, rngs.stream(6, i))
            for step in traj.steps:
                self.assertLessEqual(abs(step.deviation), 0.5)
                self.assertGreaterEqual(step.t_star_next, cfg.sigma_min)
                self.assertIsNotNone(step.log_prob)

    def test_clamp_flag(self):
        """Overshooting the last interval clamps and flags the step"""
        cfg = AsyncConfig(gamma=1.0, bound="lifted", stochastic=False)
        traj = sample_async(analytic_field(), ConstantRatioPolicy(1.0), self.grid, Condition(0), 5.0, cfg,
                            rngs.stream(7, "clamp"))
        last = traj.steps[-1]
        self.assertTrue(last.clamped)
        self.assertEqual(last.t_star_next, cfg.sigma_min)
        self.assertIsNone(last.log_prob)

    def test_untrained_tpm_ratio_mean(self):
        """Fresh TPM draws average 0.5 over 1000 rollouts"""
        tpm, _ = small_tpm(seed=8)
        grid = make_time_grid(1)
        cfg = AsyncConfig(stochastic=True)
        draws = [
            sample_async(analytic_field(), tpm, grid, Condition(i % 2), 5.0, cfg, rngs.stream(8, i)).steps[0].r
            for i in range(1000)
        ]
        self.assertAlmostEqual(float(np.mean(draws)), 0.5, delta=0.02)

    def test_mode_is_deterministic(self):
        """Deterministic mode ignores the stream beyond the initial latent"""
        tpm, _ = small_tpm(seed=9, randomize_readout=True)
        a = sample_async(analytic_field(), tpm, self.grid, Condition(0), 5.0, self.cfg, rngs.stream(9, "mode"))
        b = sample_async(analytic_field(), tpm, self.grid, Condition(0), 5.0, self.cfg, rngs.stream(9, "mode"))
        self.assertTrue(torch.equal(a.sample, b.sample))
        self.assertEqual([s.r for s in a.steps], [s.r for s in b.steps])

    def test_step_cap_final_jump(self):
        """With K beyond k_max the final jump uses the last visited grid time"""
        grid = make_time_grid(20)
        cfg = AsyncConfig(k_max=10, stochastic=False)
        traj = sample_async(analytic_field(), ConstantRatioPolicy(0.5), grid, Condition(0), 5.0, cfg,
                            rngs.stream(10, "cap"))
        self.assertEqual(len(traj.steps), 10)
        expected = traj.steps[-1].x_after - grid[10] * traj.final_velocity
        self.assertTrue(torch.equal(traj.sample, expected))

    def test_tpm_inputs_follow_steps(self):
        """TPM inputs rebuilt from a trajectory carry the recorded tensors"""
        tpm, _ = small_tpm(seed=10)
        traj = sample_async(analytic_field(), tpm, self.grid, Condition(1), 5.0, AsyncConfig(),
                            rngs.stream(10, "inputs"))
        inputs = traj.tpm_inputs()
        self.assertEqual([i.k for i in inputs], list(range(len(traj.steps))))
        self.assertTrue(torch.equal(inputs[3].v, traj.steps[3].velocity))

    def test_batch_termination(self):
        """Members of one group stop together; differing lengths are refused"""
        cfg = AsyncConfig(stochastic=False)
        a = sample_async(analytic_field(), ConstantRatioPolicy(0.5), self.grid, Condition(0), 5.0, cfg,
                         rngs.stream(0, "a"))
        b = sample_async(analytic_field(), ConstantRatioPolicy(0.5), make_time_grid(5), Condition(0), 5.0, cfg,
                         rngs.stream(0, "b"))
        check_batch_termination([a, a])
        with self.assertRaises(UsageError):
            check_batch_termination([a, b])


class AlternativeSamplerTests(unittest.TestCase):
    """Velocity-scaled Euler"""

    def setUp(self):
        self.grid = make_time_grid(10)

    def test_unit_multiplier_is_sync(self):
        """w=1 reproduces the synchronous sampler bitwise"""
        field = analytic_field()
        sync = sample_sync(field, self.grid, Condition(0), 5.0, rngs.stream(1, "alt"))
        alt = sample_alternative(field, self.grid, Condition(0), 5.0, 1.0, rngs.stream(1, "alt"))
        self.assertTrue(torch.equal(sync.sample, alt.sample))

    def test_half_multiplier_single_step(self):
        """w=0.5 in one step stops halfway to a point target"""
        field = AnalyticField(point_mixture())
        rng = rngs.stream(2, "alt")
        start = torch.from_numpy(rngs.stream(2, "alt").standard_normal(2))
        alt = sample_alternative(field, make_time_grid(1), Condition(0), 1.0, 0.5, rng)
        self.assertTrue(torch.allclose(alt.sample, 0.5 * (start + vec(-1.0, 0.5)), atol=1e-12, rtol=0))

    def test_untrained_tpm_scaler_is_sync(self):
        """A fresh TPM in mode gives w = 1 and so the synchronous sample"""
        tpm, _ = small_tpm(seed=3)
        field = analytic_field()
        sync = sample_sync(field, self.grid, Condition(1), 5.0, rngs.stream(3, "alt"))
        alt = sample_alternative(field, self.grid, Condition(1), 5.0, tpm, rngs.stream(3, "alt"))
        self.assertTrue(torch.equal(sync.sample, alt.sample))

    def test_range(self):
        """Multipliers outside [0.5, 1.5] are refused"""
        with self.assertRaises(DomainError):
            sample_alternative(analytic_field(), self.grid, Condition(0), 5.0, 1.6, rngs.stream(0))

    def test_tpm_scaler_on_grid_longer_than_k_max(self):
        """Steps past the TPM's k_max reuse its last step feature instead of failing"""
        tpm, _ = small_tpm(seed=5, randomize_readout=True)
        alt = sample_alternative(analytic_field(), make_time_grid(15), Condition(0), 5.0, tpm,
                                 rngs.stream(5, "alt"), stochastic=True)
        self.assertEqual(len(alt.steps), 15)
        self.assertTrue(all(0.5 <= 1.0 + s.deviation <= 1.5 for s in alt.steps))
        self.assertTrue(all(math.isfinite(s.log_prob) for s in alt.steps))

    def test_recorded_deviation(self):
        """Each step records w - 1"""
        alt = sample_alternative(analytic_field(), self.grid, Condition(0), 5.0, 1.25, rngs.stream(4, "alt"))
        self.assertEqual({s.deviation for s in alt.steps}, {0.25})


class DeviationTests(unittest.TestCase):
    """Mean deviation and constant-deviation policies"""

    def test_mean_deviation(self):
        """Mean over all steps; gamma=0 gives a positive zero"""
        tpm, _ = small_tpm(seed=1, randomize_readout=True)
        cfg = AsyncConfig(gamma=0.0)
        trajs = [sample_async(analytic_field(), tpm, make_time_grid(4), Condition(0), 5.0, cfg, rngs.stream(i))
                 for i in range(3)]
        value = mean_deviation(trajs)
        self.assertEqual(value, 0.0)
        self.assertEqual(math.copysign(1.0, value), 1.0)

    def test_empty(self):
        """No steps is a domain error"""
        with self.assertRaises(DomainError):
            mean_deviation([])

    def test_constant_deviation_inside_bound(self):
        """d=0.25 under the standard bound maps to r=0.75 at gamma=1"""
        policy, cfg = constant_deviation(0.25, AsyncConfig())
        self.assertEqual((policy.r, cfg.gamma, cfg.stochastic), (0.75, 1.0, False))
        self.assertEqual(cfg.deviation(policy.r), 0.25)

    def test_constant_deviation_widens_scale(self):
        """Deviations beyond the bound widen gamma instead of clipping"""
        policy, cfg = constant_deviation(1.0, AsyncConfig())
        self.assertEqual(cfg.gamma, 2.0)
        self.assertEqual(cfg.deviation(policy.r), 1.0)
        policy, cfg = constant_deviation(-0.5, AsyncConfig(bound="lifted"))
        self.assertEqual(cfg.deviation(policy.r), -0.5)


if __name__ == "__main__":
    unittest.main(verbosity=2)
