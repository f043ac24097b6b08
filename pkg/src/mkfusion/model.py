"""Generative model: three level-conditioned generators, a two-headed critic,
and the adaptive fusion module with its normalized importance weights."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import LEVELS

Array = np.ndarray


def _init_param(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class GeneratorNet:
    """One-hidden-layer MLP mapping (semantic ++ noise) rows to visual rows."""

    def __init__(self, level: str, semantic_dim: int, noise_dim: int, visual_dim: int,
                 hidden: int, alpha: float, rng: np.random.Generator):
        self.level = level
        self.semantic_dim = semantic_dim
        self.noise_dim = noise_dim
        self.visual_dim = visual_dim
        self.alpha = alpha
        fan_in = semantic_dim + noise_dim
        self.w1 = _init_param(rng, fan_in, (fan_in, hidden))
        self.b1 = _init_param(rng, fan_in, (hidden,))
        self.w2 = _init_param(rng, hidden, (hidden, visual_dim))
        self.b2 = _init_param(rng, hidden, (visual_dim,))

    def named_params(self) -> dict[str, Tensor]:
        prefix = f"generator/{self.level}"
        return {f"{prefix}/w1": self.w1, f"{prefix}/b1": self.b1,
                f"{prefix}/w2": self.w2, f"{prefix}/b2": self.b2}


def generate(gen: GeneratorNet, t: Array, z: Array) -> Tensor:
    """Synthesize a batch of visual rows from semantic rows and noise rows."""
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != gen.semantic_dim:
        raise ValueError(f"generate: semantic rows must be (n, {gen.semantic_dim}), "
                         f"got {t.shape}")
    if z.shape != (t.shape[0], gen.noise_dim):
        raise ValueError(f"generate: noise must be ({t.shape[0]}, {gen.noise_dim}), "
                         f"got {z.shape}")
    x = Tensor(np.hstack([t, z]))
    h = ad.leaky_relu(ad.add(ad.matmul(x, gen.w1), gen.b1), alpha=gen.alpha)
    return ad.add(ad.matmul(h, gen.w2), gen.b2)


class DiscriminatorNet:
    """Shared two-layer trunk with a realness head and a seen-class logit head.

    The critic half (trunk plus realness head) is the part subject to weight
    clipping; the class head stays unclipped so classification can train.
    """

    def __init__(self, visual_dim: int, n_classes: int, hidden1: int, hidden2: int,
                 alpha: float, rng: np.random.Generator):
        self.visual_dim = visual_dim
        self.n_classes = n_classes
        self.alpha = alpha
        self.w1 = _init_param(rng, visual_dim, (visual_dim, hidden1))
        self.b1 = _init_param(rng, visual_dim, (hidden1,))
        self.w2 = _init_param(rng, hidden1, (hidden1, hidden2))
        self.b2 = _init_param(rng, hidden1, (hidden2,))
        self.w_real = _init_param(rng, hidden2, (hidden2, 1))
        self.b_real = _init_param(rng, hidden2, (1,))
        self.w_cls = _init_param(rng, hidden2, (hidden2, n_classes))
        self.b_cls = _init_param(rng, hidden2, (n_classes,))

    def named_params(self) -> dict[str, Tensor]:
        return {"discriminator/w1": self.w1, "discriminator/b1": self.b1,
                "discriminator/w2": self.w2, "discriminator/b2": self.b2,
                "discriminator/w_real": self.w_real, "discriminator/b_real": self.b_real,
                "discriminator/w_cls": self.w_cls, "discriminator/b_cls": self.b_cls}

    def critic_params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w_real, self.b_real]


def discriminate(disc: DiscriminatorNet, x: Tensor | Array) -> tuple[Tensor, Tensor]:
    """Return (realness column, class logit rows) for a batch of visual rows."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != disc.visual_dim:
        raise ValueError(f"discriminate: expected (n, {disc.visual_dim}) rows, "
                         f"got {x.shape}")
    h = ad.leaky_relu(ad.add(ad.matmul(x, disc.w1), disc.b1), alpha=disc.alpha)
    h = ad.leaky_relu(ad.add(ad.matmul(h, disc.w2), disc.b2), alpha=disc.alpha)
    realness = ad.add(ad.matmul(h, disc.w_real), disc.b_real)
    logits = ad.add(ad.matmul(h, disc.w_cls), disc.b_cls)
    return realness, logits


class FusionNet:
    """Per-level scalar scoring networks; each second layer has one output neuron."""

    def __init__(self, visual_dim: int, hidden: int, alpha: float,
                 rng: np.random.Generator):
        self.visual_dim = visual_dim
        self.alpha = alpha
        self.layers: dict[str, dict[str, Tensor]] = {}
        for level in LEVELS:
            self.layers[level] = {
                "w1": _init_param(rng, visual_dim, (visual_dim, hidden)),
                "b1": _init_param(rng, visual_dim, (hidden,)),
                "w2": _init_param(rng, hidden, (hidden, 1)),
                "b2": _init_param(rng, hidden, (1,)),
            }

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for level in LEVELS:
            for key, tensor in self.layers[level].items():
                out[f"fusion/{level}/{key}"] = tensor
        return out

    def score(self, level: str, x: Tensor) -> Tensor:
        layer = self.layers[level]
        h = ad.leaky_relu(ad.add(ad.matmul(x, layer["w1"]), layer["b1"]),
                          alpha=self.alpha)
        return ad.sigmoid(ad.add(ad.matmul(h, layer["w2"]), layer["b2"]))


def normalize_scores(scores: dict[str, Tensor]) -> dict[str, Tensor]:
    """Turn per-level positive scores into weights summing to one per row."""
    total = ad.add(ad.add(scores[LEVELS[0]], scores[LEVELS[1]]), scores[LEVELS[2]])
    return {level: ad.div(scores[level], total) for level in LEVELS}


def weighted_sum(features: dict[str, Tensor], weights: dict[str, Tensor]) -> Tensor:
    """Row-wise convex combination of the per-level features."""
    parts = [ad.mul(features[level], weights[level]) for level in LEVELS]
    return ad.add(ad.add(parts[0], parts[1]), parts[2])


def fuse(fusion: FusionNet, features: dict[str, Tensor]) -> tuple[Tensor, dict[str, Tensor]]:
    """Adaptive fusion: score, normalize, and combine the per-level features."""
    shapes = {features[level].shape for level in LEVELS}
    if len(shapes) != 1:
        raise ValueError(f"fuse: feature shapes differ: {sorted(shapes)}")
    scores = {level: fusion.score(level, features[level]) for level in LEVELS}
    weights = normalize_scores(scores)
    return weighted_sum(features, weights), weights


def fuse_baseline(features: dict[str, Tensor]) -> Tensor:
    """Plain elementwise mean of the three features (each weighted one third)."""
    shapes = {features[level].shape for level in LEVELS}
    if len(shapes) != 1:
        raise ValueError(f"fuse_baseline: feature shapes differ: {sorted(shapes)}")
    n = features[LEVELS[0]].shape[0]
    third = Tensor(np.full((n, 1), 1.0 / 3.0))
    return weighted_sum(features, {level: third for level in LEVELS})


class FusionGan:
    """The whole generative stack bound to one seen-class label space."""

    def __init__(self, visual_dim: int, semantic_dim: int, n_classes: int,
                 noise_dim: int = 32, gen_hidden: int = 256,
                 disc_hidden: tuple[int, int] = (256, 128), fusion_hidden: int = 64,
                 alpha: float = 0.2, seed: int = 0):
        if n_classes < 1:
            raise ValueError("model needs at least one seen class")
        self.visual_dim = visual_dim
        self.semantic_dim = semantic_dim
        self.n_classes = n_classes
        self.noise_dim = noise_dim
        self.gen_hidden = gen_hidden
        self.disc_hidden = tuple(disc_hidden)
        self.fusion_hidden = fusion_hidden
        self.alpha = alpha
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.generators = {
            level: GeneratorNet(level, semantic_dim, noise_dim, visual_dim,
                                gen_hidden, alpha, rng)
            for level in LEVELS
        }
        self.discriminator = DiscriminatorNet(visual_dim, n_classes, disc_hidden[0],
                                              disc_hidden[1], alpha, rng)
        self.fusion = FusionNet(visual_dim, fusion_hidden, alpha, rng)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for level in LEVELS:
            out.update(self.generators[level].named_params())
        out.update(self.discriminator.named_params())
        out.update(self.fusion.named_params())
        return out

    def generator_params(self) -> list[Tensor]:
        return [p for level in LEVELS
                for p in self.generators[level].named_params().values()]

    def discriminator_params(self) -> list[Tensor]:
        return list(self.discriminator.named_params().values())

    def fusion_params(self) -> list[Tensor]:
        return list(self.fusion.named_params().values())

    def generate_fused(self, t: Array, z: Array, fusion_mode: str = "adaptive"
                       ) -> tuple[dict[str, Tensor], Tensor, dict[str, Tensor] | None]:
        """Generate per-level features from shared (t, z) and fuse them."""
        features = {level: generate(self.generators[level], t, z) for level in LEVELS}
        if fusion_mode == "adaptive":
            fused, weights = fuse(self.fusion, features)
        elif fusion_mode == "summing":
            fused, weights = fuse_baseline(features), None
        else:
            raise ValueError(f"unknown fusion mode: {fusion_mode!r}")
        return features, fused, weights


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_kr(generated: Tensor, center_rows: Array) -> Tensor:
    """Mean squared distance between generated rows and their class centers."""
    centers = Tensor(np.asarray(center_rows, dtype=np.float64))
    n = generated.shape[0]
    return ad.scalar_mul(ad.l2_squared_distance(generated, centers), 1.0 / n)


def adversarial_and_classification(disc: DiscriminatorNet, batch: Tensor,
                                   labels: Array) -> Tensor:
    """-mean(realness) + cross-entropy of the class head, on one batch."""
    realness, logits = discriminate(disc, batch)
    term_adv = ad.scalar_mul(ad.reduce_mean(realness), -1.0)
    term_cls = ad.cross_entropy_with_logits(logits, labels)
    return ad.add(term_adv, term_cls)


def loss_generator(disc: DiscriminatorNet, generated: Tensor, labels: Array,
                   center_rows: Array) -> Tensor:
    """Per-level generator loss: critic term + classification + center pull."""
    return ad.add(adversarial_and_classification(disc, generated, labels),
                  loss_kr(generated, center_rows))


def loss_discriminator(disc: DiscriminatorNet, real: Array, fake: Array,
                       labels: Array) -> Tensor:
    """Critic loss mean(realness(fake)) - mean(realness(real)) plus
    classification of the real batch. ``fake`` is treated as a constant."""
    real_t = Tensor(np.asarray(real, dtype=np.float64))
    fake_t = Tensor(np.asarray(fake, dtype=np.float64))
    realness_fake, _ = discriminate(disc, fake_t)
    realness_real, logits_real = discriminate(disc, real_t)
    wasserstein = ad.sub(ad.reduce_mean(realness_fake), ad.reduce_mean(realness_real))
    return ad.add(wasserstein, ad.cross_entropy_with_logits(logits_real, labels))
