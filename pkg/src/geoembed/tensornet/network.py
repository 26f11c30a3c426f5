"""Ordered layer stacks with parameter bookkeeping."""

from __future__ import annotations

import numpy as np

from .layers import Layer


class Network:
    """A feed-forward stack of layers sharing one parameter namespace.

    Parameters are allocated by initialize(); counts and shapes are
    available before that, so audits never materialize large arrays.
    """

    def __init__(self, layers: list[Layer], name: str = "", check_finite: bool = False):
        self.layers = layers
        self.name = name
        self.check_finite = check_finite
        self._initialized = False

    def initialize(self, rng: np.random.Generator | int, weight_std: float = 1e-3) -> "Network":
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        for layer in self.layers:
            layer.init_params(rng, weight_std)
        self._initialized = True
        return self

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def layer_summaries(self) -> list[dict]:
        """One record per layer: spec, parameter shapes, parameter count."""
        return [
            {
                "index": i,
                **layer.spec(),
                "param_shapes": {k: list(v) for k, v in layer.param_shapes().items()},
                "param_count": layer.param_count,
            }
            for i, layer in enumerate(self.layers)
        ]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if not self._initialized and any(l.param_shapes() for l in self.layers):
            raise RuntimeError(f"network {self.name!r} used before initialize()")
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out = layer.forward(out, training=training)
            if self.check_finite and not np.all(np.isfinite(out)):
                raise FloatingPointError(
                    f"non-finite values after layer {type(layer).__name__} "
                    f"in network {self.name!r}"
                )
        return out

    def backward(self, dy: np.ndarray, need_input_grad: bool = True) -> np.ndarray:
        grad = dy
        for i, layer in enumerate(reversed(self.layers)):
            first = i == len(self.layers) - 1
            if first and not need_input_grad and hasattr(layer, "_x_shape"):
                from .layers import Conv2d

                if isinstance(layer, Conv2d):
                    return layer.backward(grad, need_input_grad=False)
            grad = layer.backward(grad)
        return grad

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Stable (key, array) pairs; arrays are the live parameters."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out.append((f"{self.name}/{i}/{name}", arr))
        return out

    def gradients(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.grads.items():
                out.append((f"{self.name}/{i}/{name}", arr))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays (parameters plus running statistics)."""
        state = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                state[f"{self.name}/{i}/{name}"] = arr
            for name in ("running_mean", "running_var"):
                if hasattr(layer, name):
                    state[f"{self.name}/{i}/{name}"] = getattr(layer, name)
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for name in layer.param_shapes():
                layer.params[name] = np.array(state[f"{self.name}/{i}/{name}"])
            for name in ("running_mean", "running_var"):
                key = f"{self.name}/{i}/{name}"
                if hasattr(layer, name) and key in state:
                    setattr(layer, name, np.array(state[key]))
            layer.zero_grads()
        self._initialized = True
