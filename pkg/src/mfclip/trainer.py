"""Training loop: Adam with decoupled weight decay, step-decay schedule,
per-epoch validation, checkpointing with exact resume.

Weight decay skips position embeddings, class tokens, LayerNorm parameters,
the gate matrix, and the temperature.  The learning rate is divided by ten
every ``step_epochs`` epochs.  Checkpoints carry parameters, optimizer
moments, the epoch counter, a config snapshot, the vocabulary, and the
dataset normalization statistics, so save -> load -> continue reproduces an
uninterrupted run exactly under a fixed seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from . import evaluation
from .data import DatasetManifest, batch_iterator, load_image
from .ftg import Vocabulary, encode_prompts, generate_prompts
from .model import MFCLIP, ModelConfig, build_model
from .nn import load_arrays, load_state_arrays, save_arrays, state_arrays
from .spa import LossError


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    step_epochs: int = 15
    gamma: float = 0.1
    epochs: int = 1
    batch_size: int = 24
    seed: int = 0
    dtype: str = "float32"
    decoupled_wd: bool = True
    use_kl: bool = True
    use_cmc: bool = True
    w_ce: float = 1.0
    w_kl: float = 1.0
    w_cmc: float = 1.0
    eval_batch_size: int = 32
    stats_max_images: int = 256
    on_decode_error: str = "abort"

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def validate_configs(model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    if model_cfg.use_fle and model_cfg.use_spa:
        if train_cfg.batch_size != model_cfg.batch_size:
            raise ValueError(
                f"training batch size {train_cfg.batch_size} must match the "
                f"{model_cfg.batch_size}-way pair gate"
            )
    if train_cfg.use_cmc and not model_cfg.use_fle:
        raise ValueError("contrastive loss needs the language branch enabled")
    if train_cfg.use_kl and not (model_cfg.use_fle and model_cfg.use_predictor):
        raise ValueError("KL loss needs the language branch and the predictor")


NO_DECAY_PARAM_NAMES = ("pos", "cls_token", "log_tau", "A")


def split_decay_params(model: nn.Module) -> tuple[list, list]:
    """(decay, no_decay) parameter lists per the documented exclusion list."""
    no_decay_names = set()
    for module_name, module in model.named_modules():
        if isinstance(module, nn.LayerNorm):
            for leaf, _ in module.named_parameters(recurse=False):
                full = f"{module_name}.{leaf}" if module_name else leaf
                no_decay_names.add(full)
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if name in no_decay_names or name.split(".")[-1] in NO_DECAY_PARAM_NAMES:
            no_decay.append(param)
        else:
            decay.append(param)
    return decay, no_decay


def compute_dataset_stats(
    manifest: DatasetManifest, max_images: int = 256, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel pixel mean/std over a (possibly subsampled) manifest."""
    rng = np.random.default_rng(seed)
    idx = np.arange(len(manifest))
    if len(idx) > max_images:
        idx = rng.choice(idx, size=max_images, replace=False)
    acc = np.zeros(3)
    acc_sq = np.zeros(3)
    count = 0
    for i in sorted(int(j) for j in idx):
        px = load_image(manifest.entries[i][0], manifest.interp).astype(np.float64)
        acc += px.mean(axis=(1, 2))
        acc_sq += (px**2).mean(axis=(1, 2))
        count += 1
    mean = acc / count
    var = np.maximum(acc_sq / count - mean**2, 1e-8)
    return mean, np.sqrt(var)


class Trainer:
    def __init__(self, model: MFCLIP, train_cfg: TrainConfig, vocab: Vocabulary):
        validate_configs(model.cfg, train_cfg)
        self.model = model.to(train_cfg.torch_dtype())
        self.cfg = train_cfg
        self.vocab = vocab
        self._prompt_cache: dict = {}
        decay, no_decay = split_decay_params(self.model)
        groups = [
            {"params": decay, "weight_decay": train_cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ]
        opt_cls = torch.optim.AdamW if train_cfg.decoupled_wd else torch.optim.Adam
        self.optimizer = opt_cls(
            groups, lr=train_cfg.lr, betas=(0.9, 0.999), eps=1e-8
        )
        self.epochs_done = 0

    # -- schedule / prompts ---------------------------------------------------

    def lr_at_epoch(self, epoch: int) -> float:
        return self.cfg.lr * self.cfg.gamma ** (epoch // self.cfg.step_epochs)

    def _set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def tokens_for(self, labels) -> torch.Tensor:
        """b x 4 x 77 prompt ids; prompt sets are cached per distinct label."""
        rows = []
        for label in labels:
            if label not in self._prompt_cache:
                ids = encode_prompts(generate_prompts(label), self.vocab)
                self._prompt_cache[label] = torch.from_numpy(ids)
            rows.append(self._prompt_cache[label])
        return torch.stack(rows)

    # -- steps ----------------------------------------------------------------

    def train_step(self, samples, y_onehot: np.ndarray) -> dict[str, float]:
        dtype = self.cfg.torch_dtype()
        pixels = np.stack([s.pixels for s in samples])
        images = torch.from_numpy(pixels).to(dtype)
        noise = self.model.extract_noise(pixels) if self.model.mve.ne else None
        tokens = (
            self.tokens_for([s.label for s in samples])
            if self.model.fle is not None
            else None
        )
        y = torch.from_numpy(y_onehot).to(dtype)
        outputs = self.model(images, tokens=tokens, noise=noise)
        try:
            total, parts = self.model.compute_losses(
                outputs,
                y,
                use_kl=self.cfg.use_kl,
                use_cmc=self.cfg.use_cmc,
                weights=(self.cfg.w_ce, self.cfg.w_kl, self.cfg.w_cmc),
            )
        except LossError as exc:
            sources = [s.source_id for s in samples]
            raise TrainingError(f"{exc}; batch sources: {sources}") from exc
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        return parts

    def evaluate(self, manifest: DatasetManifest) -> tuple[float, float | None]:
        self.model.eval()
        scores = evaluation.score_manifest(
            self.model, manifest, self.cfg.eval_batch_size
        )
        self.model.train()
        acc = evaluation.accuracy(scores)
        try:
            set_auc = evaluation.auc(scores)
        except evaluation.MetricError:
            set_auc = None
        return acc, set_auc

    # -- the loop ---------------------------------------------------------------

    def fit(
        self,
        train_manifest: DatasetManifest,
        val_manifest: DatasetManifest,
        out_dir: str,
        resume: bool = False,
    ) -> dict:
        os.makedirs(out_dir, exist_ok=True)
        last_path = os.path.join(out_dir, "last.ckpt")
        best_path = os.path.join(out_dir, "best.ckpt")
        metrics_path = os.path.join(out_dir, "metrics.tsv")
        best_auc = -1.0
        if resume and os.path.exists(last_path):
            meta = self.load_checkpoint(last_path)
            best_auc = meta.get("best_auc", -1.0)
        else:
            mean, std = compute_dataset_stats(
                train_manifest, self.cfg.stats_max_images, self.cfg.seed
            )
            self.model.mve.set_normalization(mean, std)
            with open(metrics_path, "w", encoding="utf-8") as fh:
                fh.write("epoch\tlr\tl_ce\tl_kl\tl_cmc\tval_acc\tval_auc\n")
            self.save_checkpoint(last_path, best_auc)
        rows = []
        for epoch in range(self.epochs_done, self.cfg.epochs):
            lr = self.lr_at_epoch(epoch)
            self._set_lr(lr)
            sums = {"ce": 0.0, "kl": 0.0, "cmc": 0.0}
            steps = 0
            batch_seed = int(
                np.random.SeedSequence([self.cfg.seed, epoch]).generate_state(1)[0]
            )
            for samples, y in batch_iterator(
                train_manifest,
                self.cfg.batch_size,
                seed=batch_seed,
                train=True,
                on_decode_error=self.cfg.on_decode_error,
            ):
                parts = self.train_step(samples, y)
                for key in sums:
                    sums[key] += parts[key]
                steps += 1
            if steps == 0:
                raise TrainingError(
                    f"manifest too small for batch size {self.cfg.batch_size}"
                )
            val_acc, val_auc = self.evaluate(val_manifest)
            row = {
                "epoch": epoch,
                "lr": lr,
                "l_ce": sums["ce"] / steps,
                "l_kl": sums["kl"] / steps,
                "l_cmc": sums["cmc"] / steps,
                "val_acc": val_acc,
                "val_auc": val_auc,
            }
            rows.append(row)
            with open(metrics_path, "a", encoding="utf-8") as fh:
                auc_s = "-" if val_auc is None else repr(val_auc)
                fh.write(
                    f"{epoch}\t{lr!r}\t{row['l_ce']!r}\t{row['l_kl']!r}"
                    f"\t{row['l_cmc']!r}\t{val_acc!r}\t{auc_s}\n"
                )
            self.epochs_done = epoch + 1
            if val_auc is not None and val_auc > best_auc:
                best_auc = val_auc
                self.save_checkpoint(best_path, best_auc)
            self.save_checkpoint(last_path, best_auc)
        return {
            "last": last_path,
            "best": best_path if os.path.exists(best_path) else last_path,
            "metrics": metrics_path,
            "rows": rows,
            "best_auc": best_auc,
        }

    # -- checkpointing ----------------------------------------------------------

    def save_checkpoint(self, path: str, best_auc: float = -1.0) -> None:
        arrays = {f"model/{k}": v for k, v in state_arrays(self.model).items()}
        name_of = {id(p): n for n, p in self.model.named_parameters()}
        for param, state in self.optimizer.state.items():
            pname = name_of[id(param)]
            for key, tensor in state.items():
                arrays[f"opt/{pname}/{key}"] = (
                    tensor.detach().cpu().numpy()
                    if isinstance(tensor, torch.Tensor)
                    else np.asarray(tensor)
                )
        meta = {
            "epochs_done": self.epochs_done,
            "best_auc": best_auc,
            "model_cfg": self.model.cfg.to_dict(),
            "train_cfg": asdict(self.cfg),
            "vocab_words": self.vocab.tokens[3:],
        }
        save_arrays(path, arrays, meta)

    def load_checkpoint(self, path: str) -> dict:
        arrays, meta = load_arrays(path)
        model_arrays = {
            k[len("model/") :]: v for k, v in arrays.items() if k.startswith("model/")
        }
        load_state_arrays(self.model, model_arrays)
        dtype = self.cfg.torch_dtype()
        params = dict(self.model.named_parameters())
        for key, arr in arrays.items():
            if not key.startswith("opt/"):
                continue
            _, pname, slot = key.split("/", 2)
            param = params[pname]
            state = self.optimizer.state[param]
            if slot == "step":
                state[slot] = torch.tensor(float(arr))
            else:
                state[slot] = torch.from_numpy(arr.copy()).to(dtype)
        self.epochs_done = meta["epochs_done"]
        return meta


def load_checkpoint_model(path: str) -> tuple[MFCLIP, Vocabulary, dict]:
    """Rebuild a model (and its vocabulary) from a training checkpoint."""
    arrays, meta = load_arrays(path)
    vocab = Vocabulary(meta["vocab_words"])
    cfg = ModelConfig.from_dict(meta["model_cfg"])
    model = build_model(cfg, vocab, seed=meta["train_cfg"]["seed"])
    dtype = {"float32": torch.float32, "float64": torch.float64}[
        meta["train_cfg"]["dtype"]
    ]
    model = model.to(dtype)
    model_arrays = {
        k[len("model/") :]: v for k, v in arrays.items() if k.startswith("model/")
    }
    load_state_arrays(model, model_arrays)
    model.eval()
    return model, vocab, meta


def infer(images, checkpoint_path: str) -> np.ndarray:
    """Vision-only probabilities for a batch, straight from a checkpoint."""
    model, _, _ = load_checkpoint_model(checkpoint_path)
    dtype = next(model.parameters()).dtype
    tensor = torch.as_tensor(np.asarray(images)).to(dtype)
    return model.infer(tensor).numpy()
