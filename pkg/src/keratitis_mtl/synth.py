"""Synthetic feature-vector datasets with the clinical label and demographic mix.

Each case draws one of five infection combinations, a sex and an age bin,
then a feature vector ``N(separability * d_combo, I)`` where the ``d_combo``
are orthonormal directions obtained from a seeded QR factorisation.

A confound ``(attribute, task, strength)`` adds ``strength * u_task`` to the
features of every case with ``attribute == 1`` and a positive ``task``
label, where ``u_task`` is the unit mean direction of the combinations that
contain the task. The shift therefore lands on the same axis the classifier
uses for that task, which is what lets it leak into subgroup performance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core.types import TASKS, Case, DatasetManifest, ValidationError

# (bacteria, fungi, amoeba) for B, F, B+F, A, B+A.
COMBINATIONS = ((1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1), (1, 0, 1))
COMBINATION_NAMES = ("B", "F", "BF", "A", "BA")
DEFAULT_COMBO_WEIGHTS = (0.5698, 0.1342, 0.1032, 0.1003, 0.0926)
DEFAULT_SEX_P_FEMALE = 0.4172
DEFAULT_AGE_BIN_PROBS = (0.0262, 0.3605, 0.3939, 0.2194)
ATTRIBUTES = ("sex", "age_bin")


def _normalized(weights, name: str) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f"{name} must be nonnegative with a positive sum")
    w = w / w.sum()
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} does not normalise")
    return w


@dataclass(frozen=True)
class Confound:
    attribute: str
    task: str
    strength: float

    def __post_init__(self):
        if self.attribute not in ATTRIBUTES:
            raise ValueError(f"attribute must be one of {ATTRIBUTES}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")


@dataclass(frozen=True)
class SynthConfig:
    n_groups: int = 2000
    combo_weights: tuple[float, ...] = DEFAULT_COMBO_WEIGHTS
    sex_p_female: float = DEFAULT_SEX_P_FEMALE
    age_bin_probs: tuple[float, ...] = DEFAULT_AGE_BIN_PROBS
    feature_dim: int = 16
    separability: float = 3.0
    confounds: tuple[Confound, ...] = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be positive")
        if len(self.combo_weights) != len(COMBINATIONS):
            raise ValueError("combo_weights needs 5 entries (B, F, BF, A, BA)")
        if len(self.age_bin_probs) != 4:
            raise ValueError("age_bin_probs needs 4 entries")
        _normalized(self.combo_weights, "combo_weights")
        _normalized(self.age_bin_probs, "age_bin_probs")
        if not 0.0 <= self.sex_p_female <= 1.0:
            raise ValueError("sex_p_female must be in [0, 1]")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.separability < 0:
            raise ValueError("separability must be nonnegative")
        object.__setattr__(self, "confounds", tuple(
            c if isinstance(c, Confound) else Confound(*c) for c in self.confounds))


def combination_directions(feature_dim: int, seed: int) -> np.ndarray:
    """(5, D) unit directions; orthonormal when D >= 5."""
    rng = np.random.default_rng([seed, 0xD1])
    g = rng.standard_normal((feature_dim, len(COMBINATIONS)))
    if feature_dim >= len(COMBINATIONS):
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        return q.T.copy()
    return (g / np.linalg.norm(g, axis=0)).T.copy()


def task_direction(feature_dim: int, task: str, seed: int) -> np.ndarray:
    """Unit mean direction of the combinations that include ``task``."""
    t = TASKS.index(task)
    dirs = combination_directions(feature_dim, seed)
    members = [i for i, combo in enumerate(COMBINATIONS) if combo[t]]
    v = dirs[members].sum(axis=0)
    return v / np.linalg.norm(v)


def generate(config: SynthConfig) -> DatasetManifest:
    n, d = config.n_groups, config.feature_dim
    ss = np.random.SeedSequence(config.seed)
    r_combo, r_sex, r_age, r_noise = (np.random.default_rng(s) for s in ss.spawn(4))

    combos = r_combo.choice(len(COMBINATIONS), size=n,
                            p=_normalized(config.combo_weights, "combo_weights"))
    sex = (r_sex.random(n) < config.sex_p_female).astype(int)
    age = r_age.choice(4, size=n, p=_normalized(config.age_bin_probs, "age_bin_probs"))
    noise = r_noise.standard_normal((n, d))
    features = noise + config.separability * combination_directions(d, config.seed)[combos]

    width = len(str(n - 1))
    cases = []
    for i in range(n):
        b, f, a = COMBINATIONS[combos[i]]
        cases.append(Case(
            case_id=f"c{i:0{width}d}", group_id=f"g{i:0{width}d}", payload=features[i],
            bacteria=b, fungi=f, amoeba=a, sex=int(sex[i]), age_bin=int(age[i]),
        ))
    manifest = DatasetManifest(cases, {
        "source": "synthetic",
        "seed": config.seed,
        "feature_dim": d,
        "separability": config.separability,
        "n_groups": n,
    })
    for c in config.confounds:
        manifest = inject_confound(manifest, c.attribute, c.task, c.strength, config.seed)
    return manifest


def inject_confound(manifest: DatasetManifest, attribute: str, task: str,
                    strength: float, seed: int) -> DatasetManifest:
    """Shift features of cases with ``attribute == 1`` and a positive ``task``
    label by ``strength`` along ``task_direction(D, task, seed)``."""
    Confound(attribute, task, strength)
    if manifest.payload_mode != "features":
        raise ValidationError("inject_confound supports feature-vector payloads only")
    if strength == 0:
        return DatasetManifest(list(manifest.cases), dict(manifest.metadata))
    dim = manifest.cases[0].payload.shape[0]
    u = task_direction(dim, task, seed)
    out = []
    for case in manifest.cases:
        if getattr(case, attribute) == 1 and getattr(case, task) == 1:
            case = replace(case, payload=case.payload + strength * u, payload_ref="")
        out.append(case)
    meta = dict(manifest.metadata)
    meta.setdefault("confounds", [])
    meta["confounds"] = meta["confounds"] + [[attribute, task, float(strength), int(seed)]]
    return DatasetManifest(out, meta)
