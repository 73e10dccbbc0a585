"""The toy encoders, the two prompt losses and a finite-difference check of their gradients."""

from __future__ import annotations

import numpy as np

from captsim.objectives import loss_class_aware, loss_general, predict, sgd_step, total_loss_and_grads
from captsim.toyclip import EncoderSpec, init_encoders, init_prompts, sample_features

spec = EncoderSpec(embed_dim=16, num_classes=5, feature_noise=0.3, seed=0, text_noise=1.0)
enc = init_encoders(spec)
state = init_prompts(spec, num_general=4, num_class_tokens=4, init_scale=0.05, seed=1)

rng = np.random.default_rng(2)
labels = rng.integers(0, 5, 40)
z = sample_features(enc, labels, spec.feature_noise, rng)
prior = np.array([0.5, 0.25, 0.15, 0.07, 0.03])
tau = 0.07

print("general loss     ", loss_general(enc, state, z, labels, tau))
print("class-aware loss ", loss_class_aware(enc, state, z, labels, prior, tau))

report, grads = total_loss_and_grads(enc, state, z, labels, prior, tau, lam=1.0)
print("total", report.total, "grad norm", np.linalg.norm(grads.flat()))

# central differences on a few coordinates
base = state.flat()
probe = state.copy()
for i in rng.choice(base.size, 5, replace=False):
    vals = []
    for h in (1e-5, -1e-5):
        v = base.copy()
        v[i] += h
        probe.assign_flat(v)
        vals.append(loss_general(enc, probe, z, labels, tau) + loss_class_aware(enc, probe, z, labels, prior, tau))
    fd = (vals[0] - vals[1]) / 2e-5
    print(f"coord {i:4d}  analytic {grads.flat()[i]: .6e}  numeric {fd: .6e}")

# a few plain SGD steps
for step in range(5):
    report, grads = total_loss_and_grads(enc, state, z, labels, prior, tau)
    state = sgd_step(state, grads, lr=0.02)
    acc = (predict(enc, state, z).argmax(axis=1) == labels).mean()
    print(f"step {step}  loss {report.total:.4f}  train acc {acc:.3f}")
