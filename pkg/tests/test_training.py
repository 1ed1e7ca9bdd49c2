"""Optimizer, schedule, epoch loop, evaluation, checkpoints."""

import json
import math

import numpy as np
import pytest

import langseg.training as training
from langseg.data import GRAMMAR_WORDS, generate_dataset, load_dataset, split_dataset
from langseg.encoders import build_vocab
from langseg.errors import (ContractError, CorruptionError, FormatError,
                            InputError, VersionError)
from langseg.model import Prediction, build_model
from langseg.rng import Rng
from langseg.tensor import Tensor
from langseg.training import (TrainConfig, adamw_step, cosine_lr,
                              evaluate, init_adamw_state, load_checkpoint,
                              named_params, read_checkpoint, save_checkpoint,
                              train, train_epoch)

CFG = TrainConfig(epochs=2, seed=3)


def tiny_dataset(tmp_path, n_train=12, n_test=4, seed=5):
    out = tmp_path / "ds"
    generate_dataset(str(out), n_train, n_test, seed=seed)
    return load_dataset(str(out))


def tiny_model(seed=3, mode="s123", k=1):
    vocab = build_vocab(GRAMMAR_WORDS)
    return build_model(Rng(seed).split(0), vocab, mode, k)


class TestAdamW:
    def test_decay_only_shrinks_by_exact_factor(self):
        p = Tensor(np.array([2.0, -3.0], dtype=np.float32), requires_grad=True)
        params = {"p": p}
        state = init_adamw_state(params)
        cfg = TrainConfig(weight_decay=0.5, seed=0)
        before = p.data.copy()
        adamw_step(params, {"p": np.zeros(2, dtype=np.float32)}, state, 0.1, cfg)
        assert np.array_equal(p.data, before * np.float32(1.0 - 0.1 * 0.5))

    def test_first_step_closed_form(self):
        g = np.array([0.25], dtype=np.float32)
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        params = {"p": p}
        state = init_adamw_state(params)
        cfg = TrainConfig(weight_decay=0.0, seed=0)
        lr = 1e-2
        adamw_step(params, {"p": g}, state, lr, cfg)
        expected = 1.0 - lr * g[0] / (abs(g[0]) + cfg.adam_eps)
        assert float(p.data[0]) == pytest.approx(expected, rel=1e-5)
        assert state.t == 1

    def test_zero_grad_zero_decay_is_fixed_point(self):
        p = Tensor(np.array([1.5], dtype=np.float32), requires_grad=True)
        params = {"p": p}
        state = init_adamw_state(params)
        cfg = TrainConfig(weight_decay=0.0, seed=0)
        before = p.data.tobytes()
        adamw_step(params, {"p": np.zeros(1, dtype=np.float32)}, state, 0.1, cfg)
        assert p.data.tobytes() == before

    def test_missing_grad_counts_as_zero(self):
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        params = {"p": p}
        state = init_adamw_state(params)
        adamw_step(params, {}, state, 0.1, TrainConfig(weight_decay=0.0, seed=0))
        assert float(p.data[0]) == 1.0


class TestCosineLr:
    def test_endpoints_exact(self):
        assert cosine_lr(0, 100, CFG) == 3e-4
        assert cosine_lr(100, 100, CFG) == 1e-6

    def test_midpoint(self):
        mid = cosine_lr(50, 100, CFG)
        assert mid == pytest.approx((3e-4 + 1e-6) / 2, rel=1e-12)

    def test_monotone_nonincreasing_and_bounded(self):
        values = [cosine_lr(s, 200, CFG) for s in range(201)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert min(values) >= 1e-6 and max(values) <= 3e-4

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            cosine_lr(-1, 10, CFG)
        with pytest.raises(ContractError):
            cosine_lr(11, 10, CFG)
        with pytest.raises(ContractError):
            cosine_lr(0, 0, CFG)


class TestTrainEpoch:
    def test_determinism(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        records = manifest.records[:8]
        losses = []
        for _ in range(2):
            model = tiny_model()
            state = init_adamw_state(named_params(model))
            cfg = TrainConfig(epochs=1, batch_size=4, seed=7)
            stats = train_epoch(model, records, cfg, Rng(7), state)
            losses.append(stats["losses"])
        assert losses[0] == losses[1]

    def test_partial_batch_kept(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        model = tiny_model()
        state = init_adamw_state(named_params(model))
        cfg = TrainConfig(epochs=1, batch_size=5, seed=1)
        stats = train_epoch(model, manifest.records[:12], cfg, Rng(1), state)
        assert stats["batches"] == 3  # 5 + 5 + 2

    def test_empty_split_rejected(self):
        model = tiny_model()
        state = init_adamw_state(named_params(model))
        with pytest.raises(InputError):
            train_epoch(model, [], CFG, Rng(1), state)

    def test_loss_descends_on_tiny_problem(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        records = manifest.records[:8]
        model = tiny_model(k=0, mode="none")
        state = init_adamw_state(named_params(model))
        cfg = TrainConfig(epochs=1, batch_size=8, seed=2, lr_max=1e-3,
                          zoom_prob=0.0)
        first = train_epoch(model, records, cfg, Rng(2), state,
                            start_step=0, total_steps=30)["loss"]
        last = None
        for step in range(1, 30):
            last = train_epoch(model, records, cfg, Rng(100 + step), state,
                               start_step=step, total_steps=30)["loss"]
        assert last < first


class TestEvaluate:
    def test_ground_truth_stub_scores_perfectly(self, tmp_path, monkeypatch):
        manifest = tiny_dataset(tmp_path)
        records = manifest.records[:4]
        model = tiny_model()

        def stub_forward(images, prompts, m):
            data = images.data if isinstance(images, Tensor) else images
            idx = [np.abs(r.image - data[i, 0]).sum() for i in range(len(data))
                   for r in records]
            masks = np.stack([records[int(np.argmin(
                [np.abs(r.image - data[i, 0]).sum() for r in records]))].mask
                for i in range(len(data))])[:, None]
            probs = Tensor(np.clip(masks, 0.02, 0.98) * 0 + masks * 0.96 + 0.02)
            return Prediction(logits=probs, probabilities=probs,
                              mask=(probs.data > 0.5).astype(np.uint8))

        monkeypatch.setattr(training, "model_forward", stub_forward)
        rec = evaluate(model, records)
        assert rec.acc == rec.dice == rec.jaccard == 1.0

    def test_mean_of_per_sample_dice(self, tmp_path, monkeypatch):
        manifest = tiny_dataset(tmp_path)
        records = manifest.records[:2]
        model = tiny_model()
        outputs = {0: records[0].mask, 1: np.zeros_like(records[1].mask)}

        def stub_forward(images, prompts, m):
            data = images.data if isinstance(images, Tensor) else images
            masks = np.stack([outputs[i] for i in range(len(data))])[:, None]
            probs = Tensor(masks * 0.9 + 0.05)
            return Prediction(logits=probs, probabilities=probs,
                              mask=(probs.data > 0.5).astype(np.uint8))

        monkeypatch.setattr(training, "model_forward", stub_forward)
        rec = evaluate(model, records)
        assert rec.dice == pytest.approx(0.5)

    def test_matches_independent_recomputation(self, tmp_path):
        from langseg.model import metrics, model_forward
        manifest = tiny_dataset(tmp_path)
        records = manifest.records[:6]
        model = tiny_model()
        rec = evaluate(model, records, batch_size=4)
        dices = []
        for r in records:
            pred = model_forward(r.image[None], (r.stage1, r.stage2, r.stage3),
                                 model)
            dices.append(metrics(pred.mask[0], r.mask.astype(np.uint8))[1])
        assert rec.dice == pytest.approx(float(np.mean(dices)), abs=1e-9)

    def test_empty_split_rejected(self):
        with pytest.raises(InputError):
            evaluate(tiny_model(), [])


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = tiny_model(k=2)
        params = named_params(model)
        state = init_adamw_state(params)
        state.t = 17
        for name in list(state.m)[:3]:
            state.m[name] += 0.25
        path = str(tmp_path / "model.ckpt")
        cfg = TrainConfig(epochs=4, seed=9)
        save_checkpoint(model, state, path, cfg=cfg, epoch=2, rng=Rng(5))
        loaded, loaded_state, meta = load_checkpoint(path)
        for name, p in named_params(loaded).items():
            assert p.data.tobytes() == params[name].data.tobytes(), name
        for name in params:
            assert loaded_state.m[name].tobytes() == state.m[name].tobytes()
            assert loaded_state.v[name].tobytes() == state.v[name].tobytes()
        assert loaded_state.t == 17
        assert meta["epoch"] == 2
        assert meta["config"]["seed"] == 9

    def test_magic_bytes(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        model = tiny_model()
        save_checkpoint(model, init_adamw_state(named_params(model)), path)
        with open(path, "rb") as f:
            assert f.read(4) == b"LGSD"

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_unknown_version_rejected(self, tmp_path):
        model = tiny_model()
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(model, init_adamw_state(named_params(model)), path)
        with open(path, "rb") as f:
            data = bytearray(f.read())
        data[4:8] = (99).to_bytes(4, "little")
        (tmp_path / "v.ckpt").write_bytes(bytes(data))
        with pytest.raises(VersionError):
            load_checkpoint(str(tmp_path / "v.ckpt"))

    def test_truncation_rejected_without_partial_model(self, tmp_path):
        model = tiny_model()
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(model, init_adamw_state(named_params(model)), path)
        with open(path, "rb") as f:
            data = f.read()
        (tmp_path / "t.ckpt").write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptionError):
            load_checkpoint(str(tmp_path / "t.ckpt"))

    def test_trailing_garbage_rejected(self, tmp_path):
        model = tiny_model()
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(model, init_adamw_state(named_params(model)), path)
        with open(path, "rb") as f:
            data = f.read()
        (tmp_path / "g.ckpt").write_bytes(data + b"xx")
        with pytest.raises(CorruptionError):
            read_checkpoint(str(tmp_path / "g.ckpt"))


class TestTrainLoop:
    def test_two_runs_identical_history(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n_train=10, n_test=0)
        histories = []
        for _ in range(2):
            train_recs, val_recs, _ = split_dataset(manifest, seed=2)
            model = tiny_model(seed=2)
            cfg = TrainConfig(epochs=2, batch_size=4, seed=2)
            result = train(model, train_recs, val_recs, cfg)
            histories.append(result.history)
        assert histories[0] == histories[1]

    def test_log_schema(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n_train=10, n_test=0)
        train_recs, val_recs, _ = split_dataset(manifest, seed=2)
        model = tiny_model(seed=2)
        log_path = str(tmp_path / "log.jsonl")
        train(model, train_recs, val_recs, TrainConfig(epochs=2, batch_size=4, seed=2),
              log_path=log_path)
        with open(log_path) as f:
            rows = [json.loads(line) for line in f]
        assert len(rows) == 2
        for i, row in enumerate(rows):
            assert row["epoch"] == i
            assert {"loss", "val_dice"} <= set(row)

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n_train=10, n_test=0)
        train_recs, val_recs, _ = split_dataset(manifest, seed=2)
        cfg = TrainConfig(epochs=4, batch_size=4, seed=2)

        straight = tiny_model(seed=2)
        full = train(straight, train_recs, val_recs, cfg)

        resumed = tiny_model(seed=2)
        ckpt = str(tmp_path / "mid.ckpt")
        state = init_adamw_state(named_params(resumed))
        rng = Rng(cfg.seed).split(1)
        per_epoch = math.ceil(len(train_recs) / cfg.batch_size)
        first_half = []
        for epoch in range(2):
            stats = train_epoch(resumed, train_recs, cfg, rng, state,
                                start_step=epoch * per_epoch,
                                total_steps=cfg.epochs * per_epoch)
            first_half.append({"epoch": epoch, "loss": stats["loss"]})
        save_checkpoint(resumed, state, ckpt, cfg=cfg, epoch=1, rng=rng)

        model2, state2, meta = load_checkpoint(ckpt)
        rng2 = Rng.from_state(meta["rng"])
        second = train(model2, train_recs, val_recs, cfg, state=state2,
                       rng=rng2, start_epoch=meta["epoch"] + 1)
        resumed_losses = [r["loss"] for r in first_half] + \
            [r["loss"] for r in second.history]
        straight_losses = [r["loss"] for r in full.history]
        assert resumed_losses == straight_losses
