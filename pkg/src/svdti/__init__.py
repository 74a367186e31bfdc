"""SVD-regularized learning of diffusion tensor metric maps.

The package covers the full desk-scale loop: synthetic tensor phantoms and
their diffusion-weighted signals, Rician corruption, electrostatic
direction subsampling, least-squares tensor fitting, a small patch network
trained with a singular-value penalty whose weight can adapt itself from
validation feedback, and the evaluation and CLI tooling around it.

Submodules are imported lazily so the command line can pin BLAS thread
counts before any numeric library loads.
"""

__version__ = "0.1.0"

# public name -> defining submodule
_EXPORTS = {
    "DwiVolume": "core",
    "GradientScheme": "core",
    "MetricMaps": "core",
    "Patch": "core",
    "read_metric_maps": "core",
    "read_scheme": "core",
    "read_volume": "core",
    "write_metric_maps": "core",
    "write_scheme": "core",
    "write_volume": "core",
    "NoiseSpec": "phantom",
    "PRESETS": "phantom",
    "TensorField": "phantom",
    "add_rician_noise": "phantom",
    "make_phantom": "phantom",
    "read_tensor_field": "phantom",
    "simulate_dwi": "phantom",
    "write_tensor_field": "phantom",
    "SubsamplingResult": "qspace",
    "apply_subsampling": "qspace",
    "fibonacci_scheme": "qspace",
    "pair_energy": "qspace",
    "select_uniform": "qspace",
    "FitReport": "fit",
    "derive_metrics": "fit",
    "eigen3_sym": "fit",
    "fit_tensor_ols": "fit",
    "metrics_from_eigenvalues": "fit",
    "AdamState": "net",
    "MlpParams": "net",
    "adam_step": "net",
    "backward": "net",
    "forward": "net",
    "init_adam": "net",
    "init_params": "net",
    "load_checkpoint": "net",
    "save_checkpoint": "net",
    "LossBreakdown": "loss",
    "batch_loss": "loss",
    "loss_and_grad": "loss",
    "svd_3col": "loss",
    "NalaState": "nala",
    "OuterStepRecord": "nala",
    "alternate": "nala",
    "hyper_gradient": "nala",
    "nala_update": "nala",
    "MODES": "train",
    "NormalizationSpec": "train",
    "TrainConfig": "train",
    "TrainResult": "train",
    "infer": "train",
    "normalize_maps": "train",
    "prepare_dataset": "train",
    "split_blocks": "train",
    "EvalReport": "metrics",
    "aggregate_reports": "metrics",
    "evaluate": "metrics",
    "mse": "metrics",
    "psnr": "metrics",
    "ssim": "metrics",
    "ssim_volume": "metrics",
}

__all__ = ["__version__", *sorted(_EXPORTS)]


def __getattr__(name: str):
    try:
        module_name = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module 'svdti' has no attribute {name!r}") from None
    import importlib

    module = importlib.import_module(f".{module_name}", __name__)
    value = getattr(module, name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
