"""White-box adversarial robustness evaluation toolkit for vision-language
models: l-inf attacks (FGSM, PGD, Auto-PGD), caption/VQA metrics, prompt
formatting strategies, a wire protocol for remote models, and a grid-run
harness with report emitters.
"""

__version__ = "0.1.0"
