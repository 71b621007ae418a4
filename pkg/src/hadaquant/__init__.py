"""Hadamard-assisted low-bit tensor compression toolkit.

Core pieces: the CSRT tensor format with deterministic sampling, the
normalized Walsh-Hadamard transform, fake quantization with decomposed
scale/zero offsets, magnitude pruning with 1-bit mask accounting, the
paired pre/post-transform statistical battery, gradient calibration of
quantizer parameters, a toy transformer-layer surrogate, and PSNR/SSIM.
"""

from .errors import DataError, DegenerateInputError, FormatError
from .hadamard import PadInfo, hadamard_inverse, hadamard_transform, next_pow2, pad_last_dim
from .metrics import Image, as_image, psnr, ssim
from .prune import PruneMask, magnitude_threshold, prune_structured, prune_unstructured
from .quant import (
    PackedTensor,
    QuantParams,
    aggregate_bits_per_parameter,
    bits_per_parameter,
    clip,
    dequantize,
    fake_quantize,
    load_packed,
    pack,
    quantize,
    save_packed,
    search_bounds,
    unpack,
)
from .stats import (
    AnalysisResult,
    PairedSummary,
    TestResult,
    eps_band_proportion,
    eps_sweep,
    paired_hadamard_analysis,
    shapiro_wilk,
    tensor_range,
    wilcoxon_one_sided,
)
from .finetune import CalibSet, FinetuneConfig, Gradients, QuantizedLinear, finetune_params, ste_gradients
from .tensor import Seed, Tensor, load_tensor, sample_elements, save_tensor
from .toymodel import (
    PipelineReport,
    QuantPlan,
    ToyLayer,
    build_plan,
    evaluate_pipeline,
    finetune_plan,
    forward_fp,
    forward_quantized,
    make_toy_input,
    make_toy_layer,
)

__version__ = "0.1.0"
