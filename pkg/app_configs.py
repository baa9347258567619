# Copyright 2024 D-Wave
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""This file stores default parameters for the library and the command line.

Every key accepted in a run configuration file has its default here. The
``[model]``, ``[train]`` and ``[data]`` dictionaries are the documented defaults
for the matching configuration sections.
"""

APP_TITLE = "Attention Flow"

RANDOM_SEED = 0

# Environment variable capping worker threads (1 keeps reductions bit-identical).
THREADS_ENV_VAR = "ATTNFLOW_THREADS"
DEFAULT_THREADS = 1

##########################
# Numerical tolerances   #
##########################

# LU pivots below this magnitude are reported as singular.
PIVOT_FLOOR = 1e-12

# Coupling log-scales are squashed as LOG_SCALE_CLAMP * tanh(raw).
LOG_SCALE_CLAMP = 1.9

# Lower bound on the standard deviation used by actnorm's data-dependent init.
ACTNORM_MIN_STD = 1e-6

# Attention scales below this value cannot be divided out on the inverse pass.
MIN_ATTENTION_SCALE = 1e-12

# Mixture CDF inversion by bisection.
BISECTION_BRACKET_WIDTH = 20.0
BISECTION_MAX_WIDENINGS = 60
BISECTION_MAX_ITERS = 200
BISECTION_TOLERANCE = 1e-12
BISECTION_CDF_RESIDUAL = 1e-10

# Standard deviation of the random init of hidden convolutions.
HIDDEN_INIT_SCALE = 0.05

# Standard deviation of the random init of iSDP query/key and iMap G2 weights.
ATTENTION_INIT_SCALE = 0.05

# Finite-difference oracles.
FD_EPSILON = 1e-5
FD_MAX_DIMENSION = 256

########################
# Configuration file   #
########################

MODEL_DEFAULTS = {
    "levels": 1,
    "steps": 2,
    "coupling": "affine",
    "split_rule": "channel",
    "channels": 16,
    "attention": "none",
    "position": "pos4",
    "heads": 1,
    "patches": 4,
    "activation": "sigmoid",
    "pure_eq6": False,
    "attention_channels": 0,
    "mask_phase": 0,
    "mask_seed": 0,
    "mixture_components": 4,
    "conditional": False,
    "condition_channels": 1,
    "encoder_channels": 4,
    "input_channels": 1,
    "input_height": 8,
    "input_width": 8,
    "seed": RANDOM_SEED,
}

TRAIN_DEFAULTS = {
    "lr": 8e-4,
    "batch": 32,
    "iters": 1000,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "clip": 50.0,
    "seed": RANDOM_SEED,
    "checkpoint_every": 250,
    "warmup": 500,
    "log_every": 50,
    "temperature": 0.8,
    "grid_rows": 4,
    "grid_cols": 8,
}

DATA_DEFAULTS = {
    "kind": "toy2d-grid",
    "name": "checker-density",
    "resolution": 8,
    "n": 2048,
    "path": "",
    "crop": 0,
    "downscale": 1,
    "condition": "none",
    "condition_factor": 2,
    "seed": RANDOM_SEED,
}

# Sampling temperature used when none is given.
DEFAULT_TEMPERATURE = TRAIN_DEFAULTS["temperature"]

# Moving-average window for loss curves.
LOSS_WINDOW = 50

# Attention configurations swept by the ablation command.
ABLATION_HEADS = (1, 3)

TOY_DATASETS = ("two-moons", "rings", "checker-density")
TOY_RESOLUTIONS = (8, 16)
