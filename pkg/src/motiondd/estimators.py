"""scikit-learn style estimators over the functional core.

``MotionFeatureEncoder`` turns joint motions into pose features,
``MotionTokenizer`` learns the VQ codebook, and ``TextToMotionDiffusion``
learns the conditional token denoiser. All follow the fit/transform/predict
conventions and expose hyperparameters through ``get_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import diffusion as D
from .denoiser import DenoiserTrainer, ToyDenoiser, TrainingExample
from .hsa import HierarchicalAggregator, NgramProvider, aggregate
from .motion_repr import (
    CONTACT_THRESHOLD,
    MAX_FRAMES,
    TARGET_FPS,
    JointMotion,
    MotionClip,
    canonicalize,
    decode_features,
    encode_features,
)
from .sampler import GuidanceConfig, generate
from .vq import VqTrainConfig, decode_from_tokens, encode_to_tokens, reconstruction_l1, train_toy_vq


def _feature_arrays(X):
    out = []
    for x in X:
        arr = x.features if isinstance(x, MotionClip) else check_array(x, ensure_min_samples=1)
        out.append(np.asarray(arr, dtype=np.float64))
    if not out:
        raise ValueError("no clips given")
    return out


class MotionFeatureEncoder(TransformerMixin, BaseEstimator):
    """Canonicalize joint motions and encode them as pose-feature matrices (stateless)."""

    def __init__(self, target_fps=TARGET_FPS, max_frames=MAX_FRAMES, contact_threshold=CONTACT_THRESHOLD):
        self.target_fps = target_fps
        self.max_frames = max_frames
        self.contact_threshold = contact_threshold

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for m in X:
            if not isinstance(m, JointMotion):
                raise TypeError("MotionFeatureEncoder expects JointMotion inputs")
            c = canonicalize(m, self.target_fps, self.max_frames)
            out.append(encode_features(c, self.contact_threshold).features)
        return out

    def inverse_transform(self, X):
        return [decode_features(MotionClip(x, self.target_fps)) for x in _feature_arrays(X)]


class MotionTokenizer(TransformerMixin, BaseEstimator):
    """VQ tokenizer: ``fit`` on feature clips, ``transform`` to token sequences."""

    def __init__(self, n_codes=32, code_dim=16, hidden=64, beta=0.25, learning_rate=2e-3, max_steps=2000,
                 batch_size=16, decay=0.99, reset_every=20, usage_threshold=1.0, random_state=0):
        self.n_codes = n_codes
        self.code_dim = code_dim
        self.hidden = hidden
        self.beta = beta
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.decay = decay
        self.reset_every = reset_every
        self.usage_threshold = usage_threshold
        self.random_state = random_state

    def fit(self, X, y=None):
        clips = _feature_arrays(X)
        cfg = VqTrainConfig(K=self.n_codes, d=self.code_dim, hidden=self.hidden, beta=self.beta,
                            lr=self.learning_rate, steps=self.max_steps, batch_size=self.batch_size,
                            decay=self.decay, reset_every=self.reset_every,
                            usage_threshold=self.usage_threshold, seed=self.random_state)
        self.model_, self.codebook_, curve = train_toy_vq(clips, cfg)
        self.loss_curve_ = np.array(curve)
        self.n_features_in_ = clips[0].shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "codebook_")
        toks = [encode_to_tokens(x, self.model_, self.codebook_) for x in _feature_arrays(X)]
        if len({len(t) for t in toks}) == 1:
            return np.stack(toks)
        return toks

    def inverse_transform(self, U):
        check_is_fitted(self, "codebook_")
        return [decode_from_tokens(np.asarray(u), self.model_, self.codebook_).features for u in U]

    def score(self, X, y=None):
        """Negative mean absolute reconstruction error."""
        check_is_fitted(self, "codebook_")
        return -reconstruction_l1(_feature_arrays(X), self.model_, self.codebook_)


class TextToMotionDiffusion(BaseEstimator):
    """Conditional discrete diffusion over token sequences.

    ``fit(U, texts, sources)`` trains the denoiser and the text aggregator;
    ``predict(texts)`` samples one token sequence per text (``None`` for
    unconditional). Tokens lie in ``[0, n_codes)``.
    """

    def __init__(self, n_codes=None, n_steps=16, profile="mask-and-replace", leak=0.1, hidden=64, n_blocks=2,
                 cond_dim=32, text_width=32, max_iter=2000, batch_size=32, optimizer="adamw",
                 learning_rate=2e-3, weight_decay=4.5e-2, cosine_decay=False, aux_weight=0.01,
                 sigma_curated=0.1, sigma_wild=0.3, guidance_scale=2.0, inference_steps=None, random_state=0):
        self.n_codes = n_codes
        self.n_steps = n_steps
        self.profile = profile
        self.leak = leak
        self.hidden = hidden
        self.n_blocks = n_blocks
        self.cond_dim = cond_dim
        self.text_width = text_width
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.cosine_decay = cosine_decay
        self.aux_weight = aux_weight
        self.sigma_curated = sigma_curated
        self.sigma_wild = sigma_wild
        self.guidance_scale = guidance_scale
        self.inference_steps = inference_steps
        self.random_state = random_state

    def fit(self, U, texts=None, sources=None):
        U = check_array(U, dtype=np.int64, ensure_min_samples=1)
        K = int(U.max()) + 1 if self.n_codes is None else self.n_codes
        if U.min() < 0 or U.max() >= K:
            raise ValueError(f"tokens must lie in [0, {K})")
        if texts is not None and len(texts) != len(U):
            raise ValueError("one text per sequence")
        sources = ["curated"] * len(U) if sources is None else list(sources)
        seed = self.random_state
        self.provider_ = NgramProvider(width=self.text_width, seed=seed)
        self.schedule_ = D.build_schedule(self.n_steps, K, profile=self.profile, leak=self.leak)
        self.denoiser_ = ToyDenoiser(K, self.n_steps, hidden=self.hidden, cond_dim=self.cond_dim,
                                     n_blocks=self.n_blocks, seed=seed)
        self.aggregator_ = HierarchicalAggregator(dict(self.provider_.widths), cond_dim=self.cond_dim, seed=seed)
        cache = {}
        examples = []
        for i, u in enumerate(U):
            text = None if texts is None else texts[i]
            feats = None
            if text is not None:
                if text not in cache:
                    cache[text] = self.provider_.embed(text)
                feats = cache[text]
            examples.append(TrainingExample(u, sources[i], feats))
        trainer = DenoiserTrainer(self.denoiser_, self.schedule_, self.aggregator_,
                                  sigma_map={"curated": self.sigma_curated, "wild": self.sigma_wild},
                                  aux_weight=self.aux_weight, optimizer=self.optimizer, lr=self.learning_rate,
                                  weight_decay=self.weight_decay, seed=seed,
                                  decay_steps=self.max_iter if self.cosine_decay else None)
        rng = np.random.default_rng([seed, 1])
        for _ in range(self.max_iter):
            trainer.train_step([examples[i] for i in rng.integers(0, len(examples), size=self.batch_size)])
        self.loss_curve_ = np.array([h.loss for h in trainer.history])
        self.n_codes_ = K
        self.length_ = U.shape[1]
        return self

    def _cfg(self, seed):
        steps = self.n_steps if self.inference_steps is None else self.inference_steps
        return GuidanceConfig(s=self.guidance_scale, steps=steps, seed=seed)

    def predict(self, texts, length=None, seed=None):
        """One sampled token sequence per entry of ``texts``."""
        check_is_fitted(self, "denoiser_")
        n = self.length_ if length is None else length
        seed = self.random_state if seed is None else seed
        texts = list(texts)
        out = np.empty((len(texts), n), dtype=np.int64)
        cond_rows = [i for i, t in enumerate(texts) if t is not None]
        null_rows = [i for i, t in enumerate(texts) if t is None]
        if cond_rows:
            cond = np.stack([aggregate(self.aggregator_, self.provider_.embed(texts[i])) for i in cond_rows])
            out[cond_rows] = generate(self.denoiser_, cond, self._cfg(seed), n, self.schedule_,
                                      n_samples=len(cond_rows), call_index=0)
        if null_rows:
            out[null_rows] = generate(self.denoiser_, None, self._cfg(seed), n, self.schedule_,
                                      n_samples=len(null_rows), call_index=1)
        return out

    def sample(self, n_samples, length=None, seed=None):
        """Unconditional samples."""
        return self.predict([None] * n_samples, length, seed)
