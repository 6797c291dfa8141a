"""Co-learning objectives: cross-entropy, positive mining, the grounding and
separation losses, cyclic mining from separation residuals and the composite
objectives.

Every grounding helper takes a ``grounder`` callable mapping an audio embedding and
an ``[N, E]`` stack of object embeddings to ``[N, 2]`` probabilities. All argmin and
argmax decisions break ties to the lowest index.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from .exceptions import ConfigurationError, ContractViolation, InputError
from .logger import get_logger
from .nets import GroundingScore, binarize
from .tfspace import clip_to_magspec, spec_l1_distance

logger = get_logger(__name__)

Y_POS = (1.0, 0.0)
Y_NEG = (0.0, 1.0)

PROB_CLAMP = 1e-7

Grounder = Callable[[Tensor, Tensor], Tensor]

OBJECTIVES = ("grounding", "random_obj", "col", "ccol", "oracle")


def _probs(score) -> Tensor:
    if isinstance(score, GroundingScore):
        score = score.probs
    if torch.is_tensor(score):
        return score
    return torch.as_tensor(score, dtype=torch.float64)


def cross_entropy(score, label) -> Tensor:
    """``-sum(label * log(clamp(g, 1e-7, 1)))`` over the last axis."""
    probs = _probs(score)
    target = torch.as_tensor(label, dtype=probs.dtype, device=probs.device)
    return -(target * torch.log(torch.clamp(probs, PROB_CLAMP, 1.0))).sum(dim=-1)


def first_argmin(values) -> int:
    values = values.detach().cpu().numpy() if torch.is_tensor(values) else np.asarray(values)
    return int(np.argmin(values))


def first_argmax(values) -> int:
    values = values.detach().cpu().numpy() if torch.is_tensor(values) else np.asarray(values)
    return int(np.argmax(values))


def _stack(candidates) -> Tensor:
    if torch.is_tensor(candidates):
        if candidates.dim() == 1:
            candidates = candidates.unsqueeze(0)
        if candidates.shape[0] == 0:
            raise InputError("cannot mine from an empty candidate list")
        return candidates
    if len(candidates) == 0:
        raise InputError("cannot mine from an empty candidate list")
    return torch.stack(list(candidates))


def _positive_terms(f_s: Tensor, candidates, grounder: Grounder) -> Tuple[Tensor, int]:
    probs = _probs(grounder(f_s, _stack(candidates)))
    # select on the raw score; the clamp only bounds the loss value
    n_hat = first_argmax(probs[:, 0])
    return cross_entropy(probs[n_hat], Y_POS), n_hat


def mine_positive_solo(f_s: Tensor, candidates, grounder: Grounder) -> int:
    """The first candidate with the highest sounding probability ``g[0]`` for ``f_s``."""
    return _positive_terms(f_s, candidates, grounder)[1]


def loss_grd_s(f_s: Tensor, candidates, negative: Tensor, grounder: Grounder) -> Tensor:
    """Grounding loss of one video against its own solo sound.

    The mined positive comes from ``candidates``, ``negative`` is an object drawn from
    the other composed video. Callers add the symmetric term for the second video.
    """
    positive, _ = _positive_terms(f_s, candidates, grounder)
    neg = cross_entropy(grounder(f_s, _stack(negative)), Y_NEG)[0]
    return neg + positive


def loss_grd_m(f_m: Tensor, candidates_per_video: Sequence, grounder: Grounder) -> Tensor:
    """Mixed-sound grounding loss: the best positive pairing in every video."""
    total = None
    for candidates in candidates_per_video:
        term, _ = _positive_terms(f_m, candidates, grounder)
        total = term if total is None else total + term
    if total is None:
        raise InputError("mixed-sound grounding needs at least one video")
    return total


def _check_gates(gates: Tensor) -> None:
    if not torch.all((gates == 0) | (gates == 1)):
        raise ContractViolation(f"gates must be 0 or 1, got {gates.tolist()}")


def _separation_loss(targets, separated, gates, mode: str) -> Tensor:
    if len(targets) != len(separated) or len(targets) != len(gates):
        raise InputError("separation loss needs one target, one prediction stack and one gate vector per video")
    total = None
    for target, preds, gate in zip(targets, separated, gates):
        if preds.dim() == 2:
            preds = preds.unsqueeze(0)
        if tuple(preds.shape[1:]) != tuple(target.shape):
            raise InputError(f"predictions {tuple(preds.shape)} do not match target {tuple(target.shape)}")
        gate = torch.as_tensor(gate, dtype=preds.dtype, device=preds.device).detach().reshape(-1)
        if gate.shape[0] != preds.shape[0]:
            raise InputError(f"{gate.shape[0]} gates for {preds.shape[0]} objects")
        _check_gates(gate)
        estimate = (gate[:, None, None] * preds).sum(dim=0)
        term = spec_l1_distance(target, estimate, mode)
        total = term if total is None else total + term
    return total


def _as_tensor_list(items) -> List[Tensor]:
    return [x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64)) for x in items]


def loss_sep_plain(targets: Sequence, separated: Sequence, mode: str = "mean") -> Tensor:
    """Mix-and-separate L1 loss: each video's target against the sum of its objects' outputs."""
    targets, separated = _as_tensor_list(targets), _as_tensor_list(separated)
    gates = [torch.ones(p.shape[0] if p.dim() == 3 else 1, dtype=p.dtype) for p in separated]
    return _separation_loss(targets, separated, gates, mode)


def loss_sep_aware(targets: Sequence, separated: Sequence, gates: Sequence, mode: str = "mean") -> Tensor:
    """Sounding-object-aware L1 loss. ``gates`` are constants, one 0/1 value per object."""
    targets, separated = _as_tensor_list(targets), _as_tensor_list(separated)
    return _separation_loss(targets, separated, gates, mode)


@dataclass
class MiningSelection:
    pos_index: Tuple[int, ...]
    neg_index: Tuple[Optional[int], ...]
    distances: Tuple[np.ndarray, ...]
    epsilon: float = 0.1


def select_from_distances(d, epsilon: float) -> Tuple[int, Optional[int]]:
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise InputError("cannot mine from an empty distance vector")
    n_star = first_argmax(d)
    return first_argmin(d), (n_star if d[n_star] > epsilon else None)


def cyclic_mine(separated: Sequence, targets: Sequence, epsilon: float = 0.1, mode: str = "mean") -> MiningSelection:
    """Mine positives (smallest residual) and negatives (largest residual above epsilon)
    per video from each object's separated spectrogram."""
    pos, neg, dists = [], [], []
    for preds, target in zip(separated, targets):
        if torch.is_tensor(preds):
            preds, target = preds.detach(), target.detach()
        if len(preds) == 0:
            raise InputError("cyclic mining needs at least one object per video")
        d = np.array([float(spec_l1_distance(p, target, mode)) for p in preds])
        n_hat, n_star = select_from_distances(d, epsilon)
        pos.append(n_hat)
        neg.append(n_star)
        dists.append(d)
    return MiningSelection(tuple(pos), tuple(neg), tuple(dists), epsilon)


def loss_grd_s_star(
    selection: MiningSelection,
    solo_embeddings: Sequence[Tensor],
    candidates_per_video: Sequence,
    negatives: Sequence[Tensor],
    grounder: Grounder,
) -> Tensor:
    """Solo-sound grounding loss with separation-mined positives and cross-video negatives."""
    total = None
    for k, (f_s, candidates, negative) in enumerate(zip(solo_embeddings, candidates_per_video, negatives)):
        positive = _stack(candidates)[selection.pos_index[k]]
        term = cross_entropy(grounder(f_s, positive.unsqueeze(0)), Y_POS)[0]
        term = term + cross_entropy(grounder(f_s, _stack(negative)), Y_NEG)[0]
        total = term if total is None else total + term
    return total


def loss_grd_m_star_hat(
    selection: MiningSelection,
    f_m: Tensor,
    candidates_per_video: Sequence,
    grounder: Grounder,
) -> Tensor:
    """Mixed-sound grounding loss on mined pairs; a video without a negative only
    contributes its positive term."""
    total = None
    for k, candidates in enumerate(candidates_per_video):
        stack = _stack(candidates)
        term = cross_entropy(grounder(f_m, stack[selection.pos_index[k]].unsqueeze(0)), Y_POS)[0]
        n_star = selection.neg_index[k]
        if n_star is not None:
            term = term + cross_entropy(grounder(f_m, stack[n_star].unsqueeze(0)), Y_NEG)[0]
        total = term if total is None else total + term
    return total


@dataclass
class LossBreakdown:
    """Every loss term of one batch. ``None`` marks a term the objective does not use."""

    l_grd_s: Optional[Tensor] = None
    l_sep: Optional[Tensor] = None
    l_sep_star: Optional[Tensor] = None
    l_grd_m: Optional[Tensor] = None
    l_grd_s_star: Optional[Tensor] = None
    l_grd_m_star_hat: Optional[Tensor] = None
    l_col: Optional[Tensor] = None
    l_ccol: Optional[Tensor] = None
    objective: str = "l_ccol"

    TERMS = ("l_grd_s", "l_sep", "l_sep_star", "l_grd_m", "l_grd_s_star", "l_grd_m_star_hat", "l_col", "l_ccol")

    @property
    def total(self) -> Tensor:
        value = getattr(self, self.objective)
        if value is None:
            raise ContractViolation(f"objective {self.objective} was not computed")
        return value

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {name: (None if getattr(self, name) is None else float(getattr(self, name))) for name in self.TERMS}


def loss_col(l_grd_s, l_sep_star, l_grd_m) -> LossBreakdown:
    return LossBreakdown(
        l_grd_s=l_grd_s,
        l_sep_star=l_sep_star,
        l_grd_m=l_grd_m,
        l_col=l_grd_s + l_sep_star + l_grd_m,
        objective="l_col",
    )


def loss_ccol(l_grd_s_star, l_sep_star, l_grd_m_star_hat) -> LossBreakdown:
    return LossBreakdown(
        l_sep_star=l_sep_star,
        l_grd_s_star=l_grd_s_star,
        l_grd_m_star_hat=l_grd_m_star_hat,
        l_ccol=l_grd_s_star + l_sep_star + l_grd_m_star_hat,
        objective="l_ccol",
    )


# Batch objective


@dataclass
class Batch:
    """Collated composite samples on the network grid.

    ``negatives[b][k]`` indexes the object of the *other* video paired with video k's
    sound as the cross-video negative; ``random_objects[b][k]`` indexes the object of
    video k the random-object baseline separates.
    """

    sample_ids: List[str]
    mixtures: Tensor  # [B, F, T]
    sounds: Tensor  # [B, 2, F, T]
    features: List[Tuple[Tensor, Tensor]]
    audible: List[Tuple[Optional[Tensor], Optional[Tensor]]]
    negatives: List[Tuple[int, int]] = field(default_factory=list)
    random_objects: List[Tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.sample_ids)


def _mean(values: List[Tensor]) -> Optional[Tensor]:
    if not values:
        return None
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total / len(values)


def mixture_gates(model, f_m: Tensor, objects: Tensor) -> Tensor:
    with torch.no_grad():
        return binarize(model.ground(f_m, objects)).to(objects.dtype)


def compute_losses(model, batch: Batch, objective: str, epsilon: float = 0.1, mode: str = "mean") -> LossBreakdown:
    """Every loss term the objective needs, averaged over the batch.

    ``objective`` is one of grounding, random_obj, col, ccol or oracle.
    """
    if objective not in OBJECTIVES:
        raise ConfigurationError(f"Unknown objective {objective!r}")
    uses_grounding = objective in ("grounding", "col", "ccol")
    uses_separation = objective != "grounding"

    B = len(batch)
    F, T = batch.mixtures.shape[-2:]
    if uses_grounding:
        f_solo = model.encode_audio(batch.sounds.reshape(B * 2, F, T)).reshape(B, 2, -1)
        f_mix = model.encode_audio(batch.mixtures)
    if uses_separation:
        feature_maps = model.separation_features(batch.mixtures)

    terms: Dict[str, List[Tensor]] = {name: [] for name in LossBreakdown.TERMS}
    for b in range(B):
        objects = [model.encode_objects(batch.features[b][k]) for k in range(2)]
        targets = [batch.sounds[b, 0], batch.sounds[b, 1]]

        if uses_grounding and objective != "ccol":
            # symmetric in the two videos
            l_grd_s = loss_grd_s(f_solo[b, 0], objects[0], objects[1][batch.negatives[b][0]], model.ground)
            l_grd_s = l_grd_s + loss_grd_s(f_solo[b, 1], objects[1], objects[0][batch.negatives[b][1]], model.ground)
            terms["l_grd_s"].append(l_grd_s)
        if objective == "grounding":
            continue

        if objective == "random_obj":
            picks = batch.random_objects[b]
            separated = [
                batch.mixtures[b] * model.masks(feature_maps[b], objects[k][picks[k]].unsqueeze(0))
                for k in range(2)
            ]
            terms["l_sep"].append(loss_sep_plain(targets, separated, mode))
            continue

        separated = [batch.mixtures[b] * model.masks(feature_maps[b], objects[k]) for k in range(2)]
        if objective == "oracle":
            gates = batch.audible[b]
            if any(g is None for g in gates):
                raise ConfigurationError(f"{batch.sample_ids[b]}: oracle gating needs audibility labels")
        else:
            gates = [mixture_gates(model, f_mix[b], objects[k]) for k in range(2)]
        l_sep_star = loss_sep_aware(targets, separated, gates, mode)
        terms["l_sep_star"].append(l_sep_star)

        if objective == "col":
            terms["l_grd_m"].append(loss_grd_m(f_mix[b], objects, model.ground))
        elif objective == "ccol":
            selection = cyclic_mine(separated, targets, epsilon, mode)
            negatives = [objects[1][batch.negatives[b][0]], objects[0][batch.negatives[b][1]]]
            terms["l_grd_s_star"].append(
                loss_grd_s_star(selection, [f_solo[b, 0], f_solo[b, 1]], objects, negatives, model.ground)
            )
            terms["l_grd_m_star_hat"].append(loss_grd_m_star_hat(selection, f_mix[b], objects, model.ground))

    means = {name: _mean(values) for name, values in terms.items()}
    if objective == "col":
        return loss_col(means["l_grd_s"], means["l_sep_star"], means["l_grd_m"])
    if objective == "ccol":
        return loss_ccol(means["l_grd_s_star"], means["l_sep_star"], means["l_grd_m_star_hat"])
    if objective == "grounding":
        return LossBreakdown(l_grd_s=means["l_grd_s"], objective="l_grd_s")
    if objective == "random_obj":
        return LossBreakdown(l_sep=means["l_sep"], objective="l_sep")
    return LossBreakdown(l_sep_star=means["l_sep_star"], objective="l_sep_star")


def collate(samples, stft, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> Batch:
    """Turn composite samples into a :class:`Batch` on the network grid.

    The cross-video negative and the random-object picks are drawn from ``generator``
    in sample order.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    mixtures, sounds, features, audible, negatives, picks = [], [], [], [], [], []
    for sample in samples:
        mixtures.append(clip_to_magspec(sample.mixture, stft).values)
        sounds.append(np.stack([clip_to_magspec(s, stft).values for s in sample.sounds]))
        videos = sample.videos
        features.append(tuple(
            torch.as_tensor(np.stack([o.raw_feature for o in objs]), dtype=dtype) for objs in videos
        ))
        audible.append(tuple(
            None if any(o.is_audible_gt is None for o in objs)
            else torch.tensor([float(o.is_audible_gt) for o in objs], dtype=dtype)
            for objs in videos
        ))
        n1, n2 = len(videos[0]), len(videos[1])
        draws = torch.randint(0, 2**31 - 1, (4,), generator=generator).tolist()
        negatives.append((draws[0] % n2, draws[1] % n1))
        picks.append((draws[2] % n1, draws[3] % n2))

    return Batch(
        sample_ids=[s.sample_id for s in samples],
        mixtures=torch.as_tensor(np.stack(mixtures), dtype=dtype),
        sounds=torch.as_tensor(np.stack(sounds), dtype=dtype),
        features=features,
        audible=audible,
        negatives=negatives,
        random_objects=picks,
    )
