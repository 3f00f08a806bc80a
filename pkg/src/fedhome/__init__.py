"""Federated-learning home-IoT testbed.

Subpackages/modules:
  model       dense classifier, backprop, freezing, round schedules
  dp          DP-SGD step (per-microbatch clipping + Gaussian noise)
  accounting  Renyi-based (epsilon, delta) accounting for DP-SGD
  datasets    deterministic synthetic activity data (3 users, 5 classes)
  protocol    length-prefixed JSON wire format + session state machines
  transport   in-memory and TCP frame transports
  server      round orchestration and weighted delta aggregation
  client      local training loop and on-device classification
  iot         smart-home simulator: rules, auth, devices, control paths
  experiments harness behind the CLI subcommands
  _kernels    compiled/NumPy training kernels, selected at import
"""

__version__ = "0.1.0"
