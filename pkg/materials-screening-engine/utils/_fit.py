"""
Training of descriptor potentials on labeled frames

Loss over N frames (energy per-atom normalized, force term averaged over the atoms of a frame):

    L = (1/N) sum_i [ a_E ((E_i - E^_i) / n_i)^2 + a_F mean_atoms |F_i - F^_i|^2 + a_S |s_i - s^_i|_F^2 ]

During training every residual is additionally divided by the training-set std of its target.
"""

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field

import config as cfg
from utils._errors import TrainingError
from utils._helper import get_logger
from utils._potential import DescriptorPotential, EnsemblePotential, make_graph_batch

logger = get_logger("fit")


def loss(frames, predictions, alpha_E=1.0, alpha_F=1.0, alpha_S=1.0, scales=None):
    if len(frames) != len(predictions) or not frames:
        raise TrainingError(f"{len(frames)} frames but {len(predictions)} predictions")
    s_E, s_F, s_S = (1.0, 1.0, 1.0) if scales is None else scales
    total = 0.0
    for k, (frame, pred) in enumerate(zip(frames, predictions)):
        n = frame.structure.n_atoms
        forces = np.asarray(pred.forces, dtype=float)
        stress = np.asarray(pred.stress, dtype=float)
        if forces.shape != frame.forces.shape or stress.shape != (3, 3):
            raise TrainingError("prediction shape does not match the labels", frame_index=k)
        e_term = ((frame.energy - pred.energy) / n / s_E) ** 2
        f_term = np.mean(np.sum(((frame.forces - forces) / s_F) ** 2, axis=1))
        s_term = np.sum(((frame.stress - stress) / s_S) ** 2)
        total += alpha_E * e_term + alpha_F * f_term + alpha_S * s_term
    return float(total / len(frames))


def error_metrics(frames, predictions):
    """MAE / RMSE of energy (eV/atom), force components (eV/A) and stress components (eV/A^3)."""
    e = np.array([(f.energy - p.energy) / f.structure.n_atoms for f, p in zip(frames, predictions)])
    fc = np.concatenate([(f.forces - p.forces).ravel() for f, p in zip(frames, predictions)])
    sc = np.concatenate([(f.stress - p.stress).ravel() for f, p in zip(frames, predictions)])
    return {
        "energy_mae": float(np.mean(np.abs(e))),
        "energy_rmse": float(np.sqrt(np.mean(e ** 2))),
        "force_mae": float(np.mean(np.abs(fc))),
        "force_rmse": float(np.sqrt(np.mean(fc ** 2))),
        "stress_mae": float(np.mean(np.abs(sc))),
        "stress_rmse": float(np.sqrt(np.mean(sc ** 2))),
    }


class FitHyperparams(BaseModel):
    epochs: int = Field(200, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(16, ge=1)
    alpha: Tuple[float, float, float] = Field((1.0, 10.0, 0.1), description="Energy, force, stress weights")
    normalize_targets: bool = True
    n_centers: int = cfg.descriptor_defaults["n_centers"]
    center_min: float = cfg.descriptor_defaults["center_min"]
    eta: float = cfg.descriptor_defaults["eta"]
    cutoff: float = cfg.descriptor_defaults["cutoff"]
    hidden: List[int] = Field(default_factory=lambda: list(cfg.descriptor_defaults["hidden"]))


class FitReport(BaseModel):
    seed: int
    final_loss: float = Field(..., description="Best validation loss with the configured weights")
    train: Dict[str, float] = Field(..., description="Error metrics on the training split")
    validation: Dict[str, float] = Field(..., description="Error metrics on the held-out split")
    history: List[Dict[str, float]] = Field(default_factory=list)
    train_indices: List[int]
    validation_indices: List[int]
    alpha: Tuple[float, float, float]
    best_epoch: int


@dataclass
class _Targets:
    energy: torch.Tensor
    forces: torch.Tensor
    stress: torch.Tensor
    n_atoms: torch.Tensor
    atom_frame: torch.Tensor
    frame_index: np.ndarray


def _targets(frames, indices, batch):
    return _Targets(
        energy=torch.tensor([frames[k].energy for k in indices]),
        forces=torch.tensor(np.concatenate([frames[k].forces for k in indices])),
        stress=torch.tensor(np.array([frames[k].stress for k in indices])),
        n_atoms=torch.as_tensor(batch.n_atoms, dtype=torch.float64),
        atom_frame=torch.as_tensor(batch.atom_frame),
        frame_index=np.asarray(indices),
    )


def frame_losses(model, batch, targets, alpha, scales, create_graph=False):
    """Per-frame weighted loss terms as a differentiable tensor."""
    s_E, s_F, s_S = scales
    energy, forces, stress, _ = model.predict_batch(batch, create_graph=create_graph)
    e_term = ((energy - targets.energy) / targets.n_atoms / s_E) ** 2
    f_sq = (((forces - targets.forces) / s_F) ** 2).sum(dim=1)
    f_term = torch.zeros(len(targets.energy)).index_add(0, targets.atom_frame, f_sq) / targets.n_atoms
    s_term = (((stress - targets.stress) / s_S) ** 2).sum(dim=(1, 2))
    return alpha[0] * e_term + alpha[1] * f_term + alpha[2] * s_term


def _check_finite(frames):
    for k, frame in enumerate(frames):
        if not (np.isfinite(frame.energy) and np.all(np.isfinite(frame.forces)) and np.all(np.isfinite(frame.stress))):
            raise TrainingError("non-finite label", frame_index=k)


def split_indices(n_frames, split, seed):
    if not 0.0 < split < 1.0:
        raise TrainingError(f"validation split must lie in (0, 1), got {split}")
    order = np.random.default_rng(seed).permutation(n_frames)
    n_val = min(max(1, int(round(split * n_frames))), n_frames - 1)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _composition_matrix(frames, indices, species):
    column = {x: k for k, x in enumerate(species)}
    A = np.zeros((len(indices), len(species)))
    for row, k in enumerate(indices):
        for x, count in frames[k].structure.composition.items():
            A[row, column[x]] = count
    return A


def _prepare(model, frames, train_idx):
    """Per-species energy shifts by least squares, feature and output scaling from the training split."""
    species = model.species
    A = _composition_matrix(frames, train_idx, species)
    E = np.array([frames[k].energy for k in train_idx])
    shifts = np.linalg.lstsq(A, E, rcond=None)[0]
    n = A.sum(axis=1)
    residual = (E - A @ shifts) / n
    forces = np.concatenate([frames[k].forces.ravel() for k in train_idx])
    stress = np.concatenate([frames[k].stress.ravel() for k in train_idx])

    batch = make_graph_batch([frames[k].structure for k in train_idx], model.cutoff)
    vectors = torch.as_tensor(batch.positions[batch.j] - batch.positions[batch.i] + batch.shifts)
    with torch.no_grad():
        features = model.descriptors(batch, vectors)
        mean = features.mean(dim=0)
        std = features.std(dim=0, unbiased=False)
        std = torch.where(std > 1.0e-8, std, torch.ones_like(std))
        model.feature_mean.copy_(mean)
        model.feature_std.copy_(std)
        model.energy_shift.copy_(torch.as_tensor(shifts))
        model.energy_scale.fill_(max(float(np.std(residual)), 1.0e-3))
    return (
        max(float(np.std(residual)), 1.0e-6),
        max(float(np.std(forces)), 1.0e-6),
        max(float(np.std(stress)), 1.0e-8),
    )


def _minibatches(frames, train_idx, batch_size, seed, cutoff):
    order = np.random.default_rng(seed + 1).permutation(train_idx)
    batches = []
    for start in range(0, len(order), batch_size):
        indices = sorted(order[start:start + batch_size].tolist())
        graph = make_graph_batch([frames[k].structure for k in indices], cutoff)
        batches.append((graph, _targets(frames, indices, graph)))
    return batches


def _predictions(model, frames, indices):
    return [model.evaluate(frames[k].structure) for k in indices]


def train(frames, split=0.2, hyperparams=None, seed=0, split_seed=None, species=None):
    """
    Momentum SGD with a cosine-decayed step on fixed mini-batches (visited in a seeded
    order every epoch); the returned model is the best-validation checkpoint.
    """
    hp = FitHyperparams() if hyperparams is None else hyperparams
    if len(frames) < 10:
        raise TrainingError(f"training needs at least 10 frames, got {len(frames)}")
    _check_finite(frames)
    train_idx, val_idx = split_indices(len(frames), split, seed if split_seed is None else split_seed)
    if species is None:
        species = sorted({x for f in frames for x in f.structure.species})
    model = DescriptorPotential(
        species, hp.n_centers, hp.center_min, hp.eta, hp.cutoff, hp.hidden, seed=seed, alpha=hp.alpha
    )
    scales = _prepare(model, frames, train_idx) if hp.normalize_targets else (1.0, 1.0, 1.0)

    batches = _minibatches(frames, train_idx, hp.batch_size, seed, model.cutoff)
    val_graph = make_graph_batch([frames[k].structure for k in val_idx], model.cutoff)
    val_targets = _targets(frames, val_idx, val_graph)

    optimizer = torch.optim.SGD(model.parameters(), lr=hp.learning_rate, momentum=hp.momentum)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=hp.epochs)
    order_rng = np.random.default_rng(seed + 2)

    best_state = copy.deepcopy(model.state_dict())
    best_val = float("inf")
    best_epoch = 0
    history = []
    for epoch in range(hp.epochs):
        lr = optimizer.param_groups[0]["lr"]
        epoch_loss = 0.0
        for b in order_rng.permutation(len(batches)):
            graph, targets = batches[b]
            optimizer.zero_grad()
            per_frame = frame_losses(model, graph, targets, hp.alpha, scales, create_graph=True)
            if not torch.all(torch.isfinite(per_frame)):
                bad = int(torch.nonzero(~torch.isfinite(per_frame))[0, 0])
                raise TrainingError("non-finite loss", frame_index=int(targets.frame_index[bad]))
            batch_loss = per_frame.mean()
            batch_loss.backward()
            optimizer.step()
            epoch_loss += float(per_frame.detach().sum())
        scheduler.step()

        val_loss = float(frame_losses(model, val_graph, val_targets, hp.alpha, scales).detach().mean())
        if not np.isfinite(val_loss):
            raise TrainingError("non-finite validation loss", frame_index=int(val_idx[0]))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        history.append({
            "epoch": float(epoch),
            "learning_rate": lr,
            "train_loss": epoch_loss / len(train_idx),
            "validation_loss": val_loss,
            "best_validation_loss": best_val,
        })

    model.load_state_dict(best_state)
    train_pred = _predictions(model, frames, train_idx)
    val_pred = _predictions(model, frames, val_idx)
    report = FitReport(
        seed=seed,
        final_loss=loss([frames[k] for k in val_idx], val_pred, *hp.alpha),
        train=error_metrics([frames[k] for k in train_idx], train_pred),
        validation=error_metrics([frames[k] for k in val_idx], val_pred),
        history=history,
        train_indices=train_idx,
        validation_indices=val_idx,
        alpha=hp.alpha,
        best_epoch=best_epoch,
    )
    logger.info(
        f"train() - seed {seed}: {len(train_idx)} train / {len(val_idx)} validation frames, "
        f"validation energy MAE {report.validation['energy_mae'] * 1000:.2f} meV/atom"
    )
    return model, report


def member_seeds(seed, k):
    """k distinct member seeds derived from one campaign seed."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(k)]


def train_ensemble(frames, k=4, seeds=None, split=0.2, hyperparams=None, seed=0, max_workers=None):
    """
    k members on the identical split, differing only in their initialization seed.
    Members train concurrently; the returned ensemble keeps their FitReports in `reports`.
    """
    if k < 2:
        raise TrainingError(f"an ensemble needs k >= 2 members, got {k}")
    seeds = member_seeds(seed, k) if seeds is None else [int(x) for x in seeds]
    if len(seeds) != k:
        raise TrainingError(f"{len(seeds)} seeds for {k} members")
    if len(set(seeds)) != len(seeds):
        raise TrainingError(f"duplicate seeds: {seeds}")
    species = sorted({x for f in frames for x in f.structure.species})
    max_workers = cfg.max_thread_workers if max_workers is None else max_workers

    def _member(member_seed):
        return train(frames, split, hyperparams, seed=member_seed, split_seed=seed, species=species)

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        trained = list(executor.map(_member, seeds))
    ensemble = EnsemblePotential([model for model, _ in trained])
    ensemble.reports = [report for _, report in trained]
    return ensemble
