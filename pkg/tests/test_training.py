import json
import math
from collections import OrderedDict

import numpy as np
import pytest

from merbench import tensor as T
from merbench.attack import AttackConfig, StopRule
from merbench.datapipe import make_split, synth_dataset
from merbench.models import ConfigError, ModelParams, ModelSpec, build_model, forward, variant_loss
from merbench.training import (AdamState, AdversarialConfig, NumericalError, TrainConfig, adam_step, load_run,
                               run_experiment, train_adversarial, train_clean)

SPEC = ModelSpec("A2B2E", conv_blocks=((4, 3, 2),), embedding_dim=16)
DATA = synth_dataset(50, (8, 12), seed=0)
SPLIT = make_split(len(DATA), 0)


def scalar_params(value):
    return ModelParams(OrderedDict(w=T.Tensor(np.array([value]), requires_grad=True, dtype=np.float64)), 0)


class TestAdam:
    def test_hand_example(self):
        params = scalar_params(1.0)
        out = adam_step(params, {"w": np.array([0.5])}, AdamState.for_params(params), 0.1)
        # bias-corrected m = 0.5, v = 0.25 -> update 0.1 * 0.5 / (0.5 + 1e-8)
        assert out["w"].data[0] == pytest.approx(1 - 0.1 * 0.5 / (0.5 + 1e-8), rel=1e-15)
        assert out["w"].data[0] == pytest.approx(0.9, abs=1e-7)

    def test_zero_gradient_leaves_parameters(self):
        params = build_model(SPEC, 0)
        state = AdamState.for_params(params)
        out = adam_step(params, {k: np.zeros(t.shape, dtype=np.float32) for k, t in params.items()}, state, 0.01)
        for k in params:
            np.testing.assert_array_equal(out[k].data, params[k].data)
        assert state.step == 1

    def test_matches_scripted_recurrence(self):
        grads = [0.3, -1.2, 0.7, 0.7]
        params, state = scalar_params(2.0), None
        state = AdamState.for_params(params)
        w, m, v = 2.0, 0.0, 0.0
        for k, g in enumerate(grads, start=1):
            params = adam_step(params, {"w": np.array([g])}, state, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.01 * (m / (1 - 0.9 ** k)) / (math.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
            assert params["w"].data[0] == pytest.approx(w, rel=1e-14)

    def test_non_finite_gradient(self):
        params = scalar_params(1.0)
        with pytest.raises(NumericalError):
            adam_step(params, {"w": np.array([np.nan])}, AdamState.for_params(params), 0.1)

    def test_missing_gradient_counts_as_zero(self):
        params = scalar_params(1.0)
        assert adam_step(params, {"w": None}, AdamState.for_params(params), 0.1)["w"].data[0] == 1.0


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.max_epochs, cfg.patience, cfg.n_seeds) == (0.0005, 8, 200, 50, 10)
    adv = AdversarialConfig()
    assert adv.every_n_epochs == 5 and adv.attack.max_iterations == 50


class TestCleanTraining:
    def test_learns_the_synthetic_task(self):
        spec = ModelSpec("A2B2E", conv_blocks=((8, 3, 2),), embedding_dim=32)
        data = synth_dataset(60, (16, 16), seed=1)
        params, log = train_clean(spec, data, make_split(60, 1), TrainConfig(0.003, 8, 50, 50), seed=0)
        assert log.records[-1].train_loss < 0.5 * log.records[0].train_loss

    def test_deterministic(self):
        cfg = TrainConfig(0.01, 8, 4, 4)
        a, la = train_clean(SPEC, DATA, SPLIT, cfg, 3)
        b, lb = train_clean(SPEC, DATA, SPLIT, cfg, 3)
        assert la.same_curves(lb)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)

    def test_zero_patience_stops_after_first_non_improving_epoch(self):
        _, log = train_clean(SPEC, DATA, SPLIT, TrainConfig(1.0, 8, 30, 0), 0)
        vals = [r.val_loss for r in log.records]
        assert log.stopped_early
        # every epoch but the last improved on the running best
        assert all(vals[i] < min(vals[:i]) for i in range(1, len(vals) - 1))
        assert vals[-1] >= min(vals[:-1])

    def test_returns_best_epoch_parameters(self):
        params, log = train_clean(SPEC, DATA, SPLIT, TrainConfig(0.05, 8, 8, 8), 1)
        assert log.best_val_loss == min(r.val_loss for r in log.records)
        out = forward(params, SPEC, DATA.x[list(SPLIT.val)])
        val = variant_loss(SPEC, out, DATA.y_emotion[list(SPLIT.val)], DATA.y_midlevel[list(SPLIT.val)]).item()
        assert val == pytest.approx(log.best_val_loss, rel=1e-5)

    def test_a2m2e_needs_midlevel(self):
        data = synth_dataset(20, (8, 8))
        data.y_midlevel = None
        with pytest.raises(ConfigError):
            train_clean(SPEC.with_variant("A2M2E"), data, make_split(20, 0), TrainConfig(max_epochs=1), 0)

    @pytest.mark.parametrize("variant", ["A2E", "A2B2E", "A2M2E"])
    def test_training_loss_decreases(self, variant):
        _, log = train_clean(SPEC.with_variant(variant), DATA, SPLIT, TrainConfig(0.005, 8, 10, 10), 0)
        assert log.records[-1].train_loss < log.records[0].train_loss


class TestAdversarialTraining:
    def test_attack_count_follows_schedule(self):
        adv = AdversarialConfig(3, AttackConfig(0.01, 0.005, 2, StopRule.none()))
        cfg = TrainConfig(0.01, 8, 7, 7, adversarial=adv)
        _, log = train_adversarial(SPEC, DATA, SPLIT, cfg, 0)
        batches = math.ceil(len(SPLIT.train) / 8)
        assert log.attack_count == (log.epochs_run // 3) * batches
        assert [r.epoch for r in log.records if r.adversarial] == [3, 6]

    def test_schedule_beyond_budget_equals_clean(self):
        cfg = TrainConfig(0.01, 8, 4, 4, adversarial=AdversarialConfig(5, AttackConfig(0.01, 0.005, 2)))
        a, la = train_adversarial(SPEC, DATA, SPLIT, cfg, 2)
        b, lb = train_clean(SPEC, DATA, SPLIT, cfg, 2)
        assert la.same_curves(lb) and la.attack_count == 0
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)

    def test_zero_epsilon_is_two_clean_steps(self):
        cfg = TrainConfig(0.01, 8, 2, 2, adversarial=AdversarialConfig(2, AttackConfig(0.0, 0.005, 3)))
        got, _ = train_adversarial(SPEC, DATA, SPLIT, cfg, 4)
        # reference loop written out by hand
        params = build_model(SPEC, 4)
        state = AdamState.for_params(params)
        train = np.asarray(SPLIT.train)
        best_val, best = math.inf, params
        for epoch in (1, 2):
            order = train[np.random.default_rng([4, epoch]).permutation(len(train))]
            for start in range(0, len(order), 8):
                sel = order[start:start + 8]
                for _ in range(2 if epoch == 2 else 1):
                    params.zero_grad()
                    loss = variant_loss(SPEC, forward(params, SPEC, DATA.x[sel]), DATA.y_emotion[sel],
                                        DATA.y_midlevel[sel])
                    loss.backward()
                    params = adam_step(params, {k: t.grad for k, t in params.items()}, state, 0.01)
            with T.no_grad():
                val_idx = list(SPLIT.val)
                val = variant_loss(SPEC, forward(params, SPEC, DATA.x[val_idx]), DATA.y_emotion[val_idx],
                                   DATA.y_midlevel[val_idx]).item()
            if val < best_val:
                best_val, best = val, params
        for k in got:
            np.testing.assert_array_equal(got[k].data, best[k].data)


class TestExperiment:
    def test_resume_and_digest_guard(self, tmp_path):
        cfg = TrainConfig(0.01, 8, 2, 2, n_seeds=3)
        first = run_experiment([SPEC], DATA, SPLIT, cfg, tmp_path, seeds=[0])
        assert len(first) == 1 and (tmp_path / "a2b2e" / "0" / "checkpoint").is_file()
        stamp = (tmp_path / "a2b2e" / "0" / "checkpoint").stat().st_mtime_ns
        arts = run_experiment([SPEC], DATA, SPLIT, cfg, tmp_path)
        assert [a.seed for a in arts] == [0, 1, 2]
        assert (tmp_path / "a2b2e" / "0" / "checkpoint").stat().st_mtime_ns == stamp
        manifest = json.loads((tmp_path / "a2b2e" / "manifest.json").read_text())
        assert sorted(manifest["completed"]) == ["0", "1", "2"]
        with pytest.raises(ConfigError):
            run_experiment([SPEC], DATA, SPLIT, TrainConfig(0.02, 8, 2, 2), tmp_path)

    def test_seed_isolation_and_logs(self, tmp_path):
        cfg = TrainConfig(0.01, 8, 2, 2, n_seeds=2)
        arts = run_experiment([SPEC], DATA, SPLIT, cfg, tmp_path / "a")
        alone = run_experiment([SPEC], DATA, SPLIT, cfg, tmp_path / "b", seeds=[1])
        assert load_run(arts[1], SPEC)["head.weight"].data.tobytes() == \
            load_run(alone[0], SPEC)["head.weight"].data.tobytes()
        lines = (arts[0].directory / "trainlog.jsonl").read_text().splitlines()
        assert set(json.loads(lines[1])) >= {"epoch", "train_loss", "val_loss", "adversarial", "wall_time"}

    def test_adversarial_label(self, tmp_path):
        cfg = TrainConfig(0.01, 8, 1, 1, n_seeds=1, adversarial=AdversarialConfig(1, AttackConfig(0.01, 0.005, 1)))
        arts = run_experiment([SPEC.with_variant("A2E")], DATA, SPLIT, cfg, tmp_path, adversarial=True)
        assert arts[0].variant == "aA2E" and (tmp_path / "aa2e" / "0" / "checkpoint").is_file()
