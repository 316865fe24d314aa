"""Latent twins: autoencoder plus latent-map surrogates of ODE and PDE solution operators.

Submodules
----------
numkit       matrix exponential and Frechet derivative, SVD helpers, seeded RNG streams
autodiff     dense MLPs with reverse-mode gradients and Adam
odelab       benchmark ODE systems and a Dormand-Prince integrator
datasets     time-pair datasets and normalization
twin         the twin model, training, evaluation and error diagnostics
structured   exponential-flow latent maps, POD and Galerkin reduction
swe          shallow-water solver with tangent-linear and adjoint steps
assimilate   observation operator, latent inference and 4D-Var
baselines    LSTM and DeepONet comparison models
experiments  end-to-end drivers used by the CLI and the acceptance tests
cli          command-line entry point
"""

__version__ = "0.1.0"
