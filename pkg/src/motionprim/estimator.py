"""scikit-learn style wrappers around the prior and the completion solver.

``MotionPrior`` takes lists of :class:`FrameSequence`; ``transform`` returns
the flattened latent means, ``predict`` the reconstructions.
``MotionCompleter`` fits the point-cloud initialization encoder on top of a
fitted prior and ``predict`` completes point-cloud sequences.
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .completion import CompletionConfig, InitEncoder, InitEncoderConfig, InitTrainConfig, complete, train_init_encoder
from .evaluation import mean_mpjpe, reconstruct
from .model import MotionPriorModel, ModelConfig
from .motion import normalize
from .training import TrainConfig, train
from .validation import check_point_cloud_sequences, check_sequences


class MotionPrior(TransformerMixin, BaseEstimator):
    def __init__(self, n_primitives=8, latent_dim=256, model_options=None, training=None, random_state=0):
        self.n_primitives = n_primitives
        self.latent_dim = latent_dim
        self.model_options = model_options
        self.training = training
        self.random_state = random_state

    def _configs(self):
        cfg = ModelConfig(n_primitives=self.n_primitives, latent_dim=self.latent_dim, **(self.model_options or {}))
        tcfg = TrainConfig(**{**(self.training or {}), "seed": self.random_state})
        return cfg, tcfg

    def fit(self, X, y=None):
        cfg, tcfg = self._configs()
        X = check_sequences(X, cfg.n_joints)
        torch.manual_seed(self.random_state)
        result = train(MotionPriorModel(cfg), X, tcfg)
        self.model_ = result.model
        self.history_ = result.history
        self.lr_reductions_ = result.lr_reductions
        return self

    def transform(self, X):
        """Latent means, shape ``(n_sequences, n_primitives * latent_dim)``."""
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.model_.cfg.n_joints)
        dtype = next(self.model_.parameters()).dtype
        out = []
        with torch.no_grad():
            for seq in X:
                norm, _ = normalize(seq)
                dist = self.model_.encode(
                    torch.tensor(norm.theta, dtype=dtype)[None],
                    torch.tensor(norm.gamma, dtype=dtype)[None],
                    torch.tensor(norm.timestamps, dtype=dtype)[None],
                )
                out.append(dist.mu[0].flatten().double().numpy())
        return np.stack(out)

    def predict(self, X):
        """Reconstructions at the input timestamps."""
        check_is_fitted(self, "model_")
        return [reconstruct(self.model_, seq) for seq in check_sequences(X, self.model_.cfg.n_joints)]

    def score(self, X, y=None):
        """Negative mean MPJPE in millimetres (higher is better)."""
        check_is_fitted(self, "model_")
        return -mean_mpjpe(self.model_, check_sequences(X, self.model_.cfg.n_joints))


class MotionCompleter(BaseEstimator):
    def __init__(self, prior=None, encoder_training=None, lambda_prior=0.01, iterations=300,
                 step_size=1e-2, output_fps=30.0, random_state=0):
        self.prior = prior
        self.encoder_training = encoder_training
        self.lambda_prior = lambda_prior
        self.iterations = iterations
        self.step_size = step_size
        self.output_fps = output_fps
        self.random_state = random_state

    def _prior_model(self):
        if isinstance(self.prior, MotionPrior):
            check_is_fitted(self.prior, "model_")
            return self.prior.model_
        if isinstance(self.prior, MotionPriorModel):
            return self.prior
        raise TypeError("prior must be a fitted MotionPrior or a MotionPriorModel")

    def fit(self, X, y=None):
        """Train the initialization encoder on motions ``X`` with the prior frozen."""
        prior = self._prior_model()
        X = check_sequences(X, prior.cfg.n_joints)
        torch.manual_seed(self.random_state)
        encoder = InitEncoder(InitEncoderConfig.matching(prior.cfg))
        icfg = InitTrainConfig(**{**(self.encoder_training or {}), "seed": self.random_state})
        self.history_ = train_init_encoder(encoder, prior, X, icfg)
        self.encoder_ = encoder
        return self

    def predict(self, P):
        """Complete each point-cloud sequence into a dense motion."""
        check_is_fitted(self, "encoder_")
        cfg = CompletionConfig(self.lambda_prior, self.iterations, self.step_size, self.output_fps)
        results = [complete(self._prior_model(), self.encoder_, p, cfg) for p in check_point_cloud_sequences(P)]
        self.results_ = results
        return [r.motion for r in results]
