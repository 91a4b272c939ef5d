"""Resolution ladder, teacher snapshots, mixture-rate estimation and the combined loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from prpd.rl import ActorCritic, ppo_loss
from prpd.tensor import (
    GaussianHead,
    Tensor,
    exp,
    gaussian_log_prob,
    logaddexp,
    mlp_forward,
    reshape,
    square,
    tmean,
)


class ScheduleError(RuntimeError):
    pass


FINISHED = "finished"


@dataclass(frozen=True)
class ResolutionSchedule:
    start: float = 70.0
    final: float = 10.0
    step: float = 10.0
    target: float = 0.95

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("resolution step must be positive")
        if self.start < self.final:
            raise ValueError("initial resolution must be coarser than the final one")
        k = (self.start - self.final) / self.step
        if abs(k - round(k)) > 1e-9:
            raise ValueError("resolution span must be a multiple of the step")
        if not (0.0 < self.target <= 1.0):
            raise ValueError("target success rate must be in (0, 1]")

    @property
    def ladder(self) -> list[float]:
        k = int(round((self.start - self.final) / self.step))
        return [self.start - i * self.step for i in range(k + 1)]


def schedule_resolution(delta: float, tau: float, schedule: ResolutionSchedule):
    """Next rung when the success rate clears the target, ``FINISHED`` on the last rung."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"success rate {tau} outside [0, 1]")
    if delta < schedule.final - 1e-9:
        raise ScheduleError(f"resolution {delta} is below the final rung {schedule.final}")
    if tau < schedule.target:
        return delta
    if delta <= schedule.final + 1e-9:
        return FINISHED
    return max(delta - schedule.step, schedule.final)


class TeacherSnapshot:
    """Frozen numpy copy of a policy; parameters are read-only arrays."""

    def __init__(self, ac: ActorCritic):
        self._pi = ac.clone().pi
        for p in self._pi.parameters():
            p.requires_grad = False
            p.data.setflags(write=False)
        self._log_std = ac.log_std.data.copy()
        self._log_std.setflags(write=False)
        self.fingerprint = ac.fingerprint()

    @property
    def log_std(self) -> np.ndarray:
        return self._log_std

    def mean_action(self, obs_scaled: np.ndarray) -> np.ndarray:
        return self._pi.predict(obs_scaled)

    def head(self, obs_scaled) -> GaussianHead:
        mean = Tensor(self.mean_action(np.asarray(obs_scaled)))
        return GaussianHead(mean, Tensor(self._log_std))

    def params(self) -> list[np.ndarray]:
        return [p.data for p in self._pi.parameters()] + [self._log_std]


def transfer_policy(ac: ActorCritic) -> tuple[ActorCritic, TeacherSnapshot]:
    """Copy every network for the next rung and freeze the old policy as teacher."""
    return ac.clone(), TeacherSnapshot(ac)


@dataclass(frozen=True)
class AlphaConfig:
    alpha0: float = 2.0
    samples: int = 4

    def __post_init__(self):
        if self.alpha0 <= 0:
            raise ValueError("alpha0 must be positive")
        if self.samples < 1:
            raise ValueError("need at least one action sample")


@dataclass(frozen=True)
class DistillWeights:
    c3: float = 0.5
    c4: float = 1.0

    def __post_init__(self):
        if self.c3 < 0 or self.c4 < 0:
            raise ValueError("loss weights must be non-negative")


def _expected_q(q_fn, obs, mean, std, eps):
    # eps: (m, N, A) shared noise; returns per-state mean over the m samples
    vals = [q_fn(obs, mean + std * e) for e in eps]
    return np.mean(vals, axis=0)


def q_gap(obs: np.ndarray, q_fn, teacher_mean: np.ndarray, teacher_std: np.ndarray,
          student_mean: np.ndarray, student_std: np.ndarray, eps: np.ndarray) -> float:
    """E_s[E_{a'~teacher} Q - E_{a~student} Q] using the same noise for both policies."""
    tq = _expected_q(q_fn, obs, teacher_mean, teacher_std, eps)
    sq = _expected_q(q_fn, obs, student_mean, student_std, eps)
    return float(np.mean(tq - sq))


def estimate_alpha(obs: np.ndarray, ac: ActorCritic, teacher: TeacherSnapshot | None,
                   cfg: AlphaConfig, rng: np.random.Generator) -> float:
    """Mixture rate clip(alpha0 * (teacher Q - student Q), 0, 1); 0 without a teacher."""
    if teacher is None:
        return 0.0
    obs = np.asarray(obs)
    if len(obs) == 0:
        raise ValueError("cannot estimate alpha from an empty buffer")
    eps = rng.standard_normal((cfg.samples, *obs.shape[:-1], ac.log_std.shape[0]))
    gap = q_gap(obs, ac.q_value, teacher.mean_action(obs), np.exp(teacher.log_std),
                ac.mean_action(obs), ac.std(), eps)
    return alpha_from_gap(gap, cfg.alpha0)


def alpha_from_gap(gap: float, alpha0: float) -> float:
    return float(min(max(alpha0 * gap, 0.0), 1.0))


def _gauss_pdf(mean, std, a):
    z = (a - mean) / std
    return np.prod(np.exp(-0.5 * z * z) / (std * math.sqrt(2 * math.pi)), axis=-1)


def mixture_density(student_mean, student_std, teacher_mean, teacher_std, alpha: float, a) -> np.ndarray:
    """(1 - alpha) * student(a) + alpha * teacher(a) for diagonal Gaussians."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must be in [0, 1]")
    ps = _gauss_pdf(np.asarray(student_mean), np.asarray(student_std), np.asarray(a))
    pt = _gauss_pdf(np.asarray(teacher_mean), np.asarray(teacher_std), np.asarray(a))
    if alpha == 0.0:
        return ps
    if alpha == 1.0:
        return pt
    return (1.0 - alpha) * ps + alpha * pt


def mixture_log_prob(student: GaussianHead, teacher: GaussianHead, alpha: float, a) -> Tensor:
    """log((1 - alpha) p_s(a) + alpha p_t(a)) as a differentiable graph."""
    ls = gaussian_log_prob(student, a)
    if alpha <= 0.0:
        return ls
    lt = gaussian_log_prob(teacher, a)
    if alpha >= 1.0:
        return lt
    return logaddexp(ls + math.log1p(-alpha), lt + math.log(alpha))


def distill_loss(obs: np.ndarray, ac: ActorCritic, teacher: TeacherSnapshot | None, alpha: float,
                 samples: int, rng: np.random.Generator, reverse: bool = False) -> Tensor:
    """Monte-Carlo KL(student || mixture), averaged over states.

    Student actions are reparameterised (a = mu + sigma * eps) so gradients
    reach the policy through both the samples and the densities. With
    ``reverse`` the KL(mixture || student) direction is used instead.
    """
    if teacher is None or alpha <= 0.0:
        return Tensor(np.array(0.0))
    obs = np.asarray(obs)
    student = ac.head(obs)
    t_head = teacher.head(obs)
    if reverse:
        return _reverse_kl(obs, student, t_head, teacher, ac, alpha, samples, rng)
    std = exp(student.log_std)
    terms = []
    for _ in range(samples):
        eps = rng.standard_normal(student.mean.shape)
        a = student.mean + std * eps
        terms.append(gaussian_log_prob(student, a) - mixture_log_prob(student, t_head, alpha, a))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return tmean(total) * (1.0 / samples)


def _reverse_kl(obs, student, t_head, teacher, ac, alpha, samples, rng):
    # samples drawn from the mixture carry no gradient; the densities do
    s_mean, s_std = student.mean.data, np.exp(student.log_std.data)
    t_mean, t_std = teacher.mean_action(obs), np.exp(teacher.log_std)
    total = None
    for _ in range(samples):
        pick_teacher = rng.random(len(obs)) < alpha
        eps = rng.standard_normal(s_mean.shape)
        a = np.where(pick_teacher[:, None], t_mean + t_std * eps, s_mean + s_std * eps)
        term = mixture_log_prob(student, t_head, alpha, a) - gaussian_log_prob(student, a)
        total = term if total is None else total + term
    return tmean(total) * (1.0 / samples)


def q_td_loss(batch: dict[str, np.ndarray], ac: ActorCritic, gamma: float,
              rng: np.random.Generator, samples: int = 1) -> Tensor:
    """Squared TD error of Q with a detached bootstrap E_{a'~pi} Q(s', a')."""
    obs, act = batch["obs"], batch["actions"]
    nxt = batch["next_obs"]
    terminal = np.asarray(batch["terminals"], dtype=np.float64)
    mean = ac.mean_action(nxt)
    std = ac.std()
    boot = np.zeros(len(nxt))
    for _ in range(samples):
        boot += ac.q_value(nxt, mean + std * rng.standard_normal(mean.shape))
    boot /= samples
    target = batch["rewards"] + gamma * (1.0 - terminal) * boot
    q = reshape(mlp_forward(ac.q, np.concatenate([obs, act], axis=-1)), (len(obs),))
    return tmean(square(q - target))


def total_loss(batch: dict[str, np.ndarray], ac: ActorCritic, teacher: TeacherSnapshot | None,
               alpha: float, weights: DistillWeights, clip_eps: float, c1: float, c2: float,
               gamma: float, samples: int, rng: np.random.Generator,
               reverse_kl: bool = False) -> tuple[Tensor, dict[str, float]]:
    """L_PPO + c3 * L_distill + c4 * L_Q."""
    loss, stats = ppo_loss(batch, ac, clip_eps, c1, c2)
    if weights.c3 > 0 and teacher is not None and alpha > 0:
        ld = distill_loss(batch["obs"], ac, teacher, alpha, samples, rng, reverse=reverse_kl)
        loss = loss + ld * weights.c3
        stats["distill"] = ld.item()
    else:
        stats["distill"] = 0.0
    if weights.c4 > 0:
        lq = q_td_loss(batch, ac, gamma, rng, samples)
        loss = loss + lq * weights.c4
        stats["q_loss"] = lq.item()
    else:
        stats["q_loss"] = 0.0
    return loss, stats
