"""End-to-end conditional density model with a scikit-learn style interface."""

import hashlib
import json
import os

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import inference
from ._validation import check_choice, check_futures, check_pasts, check_positive_int
from .basedensity import GmmHead, gmm_log_prob
from .cache import build_cache, load_cache, save_cache
from .cnf import Flow, IntegratorConfig, MlpField, flow_inverse
from .codec import IdentityCodec, LinearCodec
from .diffcore import MlpSpec, ParamStore, merge_stores
from .fmtrain import TrainConfig, train

STRATEGIES = ("nn", "random", "most_likely")


class CacheFlow(BaseEstimator):
    """Unconditional flow + conditional mixture base density + triplet cache.

    ``fit`` learns a codec for the futures, trains the flow field and the
    mixture head jointly, then inverse-transforms every training future
    into the cache. Density queries and predictions afterwards touch only
    the head and the cache.

    Parameters
    ----------
    latent_dim : int
        Codec output size d (ignored when ``codec="identity"``).
    n_modes : int
        Mixture components M.
    hidden_width, n_hidden_layers : int
        Vector field MLP shape.
    rnn_hidden : int
        GRU state size of the mixture head.
    epochs, steps : int
        Training length; ``steps`` overrides ``epochs`` when given.
    use_flow : bool
        False gives the mixture-only model (affine standardization, no ODE).
    """

    def __init__(
        self,
        latent_dim=8,
        n_modes=50,
        hidden_width=256,
        n_hidden_layers=2,
        rnn_hidden=128,
        epochs=10,
        steps=None,
        batch_size=64,
        lr=5e-4,
        lambda_nll=1.0,
        lambda_cfm=1.0,
        train_scheme="euler",
        train_steps=8,
        cache_scheme="rk4",
        cache_steps=32,
        codec="linear",
        use_flow=True,
        sigma_floor=1e-3,
        cache_precision="f64",
        random_state=0,
    ):
        self.latent_dim = latent_dim
        self.n_modes = n_modes
        self.hidden_width = hidden_width
        self.n_hidden_layers = n_hidden_layers
        self.rnn_hidden = rnn_hidden
        self.epochs = epochs
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_nll = lambda_nll
        self.lambda_cfm = lambda_cfm
        self.train_scheme = train_scheme
        self.train_steps = train_steps
        self.cache_scheme = cache_scheme
        self.cache_steps = cache_steps
        self.codec = codec
        self.use_flow = use_flow
        self.sigma_floor = sigma_floor
        self.cache_precision = cache_precision
        self.random_state = random_state

    # ------------------------------------------------------------ fitting

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.random_state,
            lambda_nll=self.lambda_nll,
            lambda_cfm=self.lambda_cfm,
            integrator=IntegratorConfig(self.train_scheme, self.train_steps),
        )

    @property
    def cache_integrator(self):
        return IntegratorConfig(self.cache_scheme, self.cache_steps)

    def fit(self, pasts, futures, with_cache=True):
        check_choice(self.codec, "codec", ("linear", "identity"))
        check_positive_int(self.n_modes, "n_modes")
        check_positive_int(self.rnn_hidden, "rnn_hidden")
        conditions = check_pasts(pasts)
        futures = check_futures(futures, len(conditions))
        rng = np.random.default_rng(self.random_state)

        if self.codec == "identity":
            codec = IdentityCodec().fit(futures)
        else:
            codec = LinearCodec(n_components=check_positive_int(self.latent_dim, "latent_dim")).fit(futures)
        x = codec.encode(futures)
        d = x.shape[1]

        flat = conditions.reshape(-1, conditions.shape[2])
        self.cond_mean_ = flat.mean(axis=0)
        self.cond_std_ = np.where(flat.std(axis=0) > 1e-12, flat.std(axis=0), 1.0)

        loc = x.mean(axis=0)
        scale = np.maximum(x.std(axis=0), 1e-6)
        field = None
        if self.use_flow:
            hidden = (check_positive_int(self.hidden_width, "hidden_width"),) * check_positive_int(
                self.n_hidden_layers, "n_hidden_layers"
            )
            field = MlpField.create(d, hidden=hidden, rng=rng)
        flow = Flow(field, loc, scale, d)
        head = GmmHead(conditions.shape[2], d, self.n_modes, self.rnn_hidden, self.sigma_floor, rng=rng)

        self.train_result_ = train(flow, head, self._standardize(conditions), x, self._train_config())
        self.codec_ = codec
        self.flow_ = flow
        self.head_ = head
        self.future_shape_ = futures.shape[1:]
        self.n_features_in_ = conditions.shape[2]
        if with_cache:
            self.cache_ = build_cache(flow, codec, futures, self.cache_integrator, self.cache_precision)
        return self

    def _standardize(self, conditions):
        return (conditions - self.cond_mean_) / self.cond_std_

    def _conditions(self, pasts):
        check_is_fitted(self, "head_")
        return self._standardize(check_pasts(pasts, self.n_features_in_))

    def rebuild_cache(self, futures):
        """Replace the cache with triplets for ``futures`` through the frozen flow."""
        check_is_fitted(self, "flow_")
        self.cache_ = build_cache(self.flow_, self.codec_, check_futures(futures), self.cache_integrator, self.cache_precision)
        return self.cache_

    @property
    def fingerprint_(self):
        check_is_fitted(self, "flow_")
        return self.flow_.fingerprint()

    @property
    def dim_(self):
        return self.flow_.dim

    # ------------------------------------------------------------ density

    def regress(self, past):
        """Mixture parameters q(z | c) for one past."""
        return self.head_.regress_batch(self._conditions(np.asarray(past)[None]))[0]

    def regress_batch(self, pasts):
        return self.head_.regress_batch(self._conditions(pasts))

    def estimate_density(self, past):
        """Cached log p(x_k | c) for every triplet; never runs the flow."""
        return inference.estimate_density(self.cache_, self.head_, self.regress(past), self.fingerprint_)

    def latent_log_prob(self, past, latents, cfg=None):
        """log p(x | c) at arbitrary latents for one past, by on-the-fly flow inversion."""
        res = flow_inverse(self.flow_, np.atleast_2d(latents), cfg or self.cache_integrator)
        return gmm_log_prob(self.regress(past), res.endpoint) + res.log_det_inv

    def score_samples(self, pasts, futures):
        """Per-item log p(encode(future_i) | past_i) in the latent space."""
        gmms = self.regress_batch(pasts)
        x = self.codec_.encode(check_futures(futures, len(gmms)))
        res = flow_inverse(self.flow_, np.atleast_2d(x), self.cache_integrator)
        return np.array([gmm_log_prob(g, z) for g, z in zip(gmms, res.endpoint)]) + res.log_det_inv

    def score(self, pasts, futures):
        """Mean log-likelihood per latent dimension."""
        return float(np.mean(self.score_samples(pasts, futures)) / self.dim_)

    # ------------------------------------------------------------ prediction

    def predict_indices(self, past, n=50, strategy="nn", rng=None):
        check_choice(strategy, "strategy", STRATEGIES)
        rng = np.random.default_rng(self.random_state if rng is None else rng)
        if strategy == "nn":
            return inference.sample_nn(self.cache_, self.head_, self.regress(past), n, rng, self.fingerprint_)
        if strategy == "random":
            return inference.sample_random(self.cache_, n, rng)
        return inference.sample_most_likely(self.estimate_density(past), n, self.cache_)

    def predict(self, pasts, n=50, strategy="nn", rng=None):
        """Decoded futures shaped (N, n, *future_shape)."""
        rng = np.random.default_rng(self.random_state if rng is None else rng)
        pasts = np.asarray(pasts, dtype=np.float64)
        out = [self.predict_indices(p, n, strategy, rng).decode(self.codec_, self.future_shape_) for p in pasts]
        return np.stack(out)

    # ------------------------------------------------------------ persistence

    def config_hash(self):
        blob = json.dumps(self.get_params(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, directory, with_cache=True):
        check_is_fitted(self, "flow_")
        os.makedirs(directory, exist_ok=True)
        stores = {"head": self.head_.params}
        if self.flow_.field is not None:
            stores["field"] = self.flow_.field.params
        merge_stores(stores).save(os.path.join(directory, "model.cfparam"))
        self.codec_.save(os.path.join(directory, "codec.cfcodec"))
        meta = {
            "params": self.get_params(),
            "config_hash": self.config_hash(),
            "cond_mean": self.cond_mean_.tolist(),
            "cond_std": self.cond_std_.tolist(),
            "flow_loc": self.flow_.loc.tolist(),
            "flow_scale": self.flow_.scale.tolist(),
            "future_shape": list(self.future_shape_),
            "n_features_in": int(self.n_features_in_),
            "fingerprint": self.fingerprint_.hex(),
        }
        with open(os.path.join(directory, "model.json"), "w") as f:
            json.dump(meta, f, indent=2)
        if with_cache and hasattr(self, "cache_"):
            save_cache(self.cache_, os.path.join(directory, "cache.cfcache"))
        return directory

    @classmethod
    def load(cls, directory, with_cache=True):
        with open(os.path.join(directory, "model.json")) as f:
            meta = json.load(f)
        model = cls(**meta["params"])
        store = ParamStore.load(os.path.join(directory, "model.cfparam"))
        model.codec_ = LinearCodec.load(os.path.join(directory, "codec.cfcodec"))
        d = len(meta["flow_loc"])
        field = None
        if model.use_flow:
            hidden = (model.hidden_width,) * model.n_hidden_layers
            field = MlpField(MlpSpec((d + 1, *hidden, d), "silu"), store.subset("field/"))
        model.flow_ = Flow(field, np.array(meta["flow_loc"]), np.array(meta["flow_scale"]), d)
        model.n_features_in_ = meta["n_features_in"]
        model.head_ = GmmHead(
            model.n_features_in_, d, model.n_modes, model.rnn_hidden, model.sigma_floor, params=store.subset("head/")
        )
        model.cond_mean_ = np.array(meta["cond_mean"])
        model.cond_std_ = np.array(meta["cond_std"])
        model.future_shape_ = tuple(meta["future_shape"])
        if with_cache and os.path.exists(os.path.join(directory, "cache.cfcache")):
            model.cache_ = load_cache(os.path.join(directory, "cache.cfcache"))
            model.cache_.check(model.fingerprint_)
        return model
