"""Synthetic side-channel datasets: Gaussian toys and simulated AES power traces."""
from leaklock.datagen.aes import (
    INV_SBOX,
    SBOX,
    AesStream,
    SyntheticAesConfig,
    SyntheticAesDevice,
    gen_synthetic_aes,
    hamming_weight,
    inv_sbox,
    lowpass_filter,
    sbox,
)
from leaklock.datagen.cmi import cmi_oracle
from leaklock.datagen.dataset import (
    StandardizationStats,
    TraceDataset,
    load_dataset,
    save_dataset,
    split,
    standardize_apply,
    standardize_fit,
)
from leaklock.datagen.toy import ToyConfig, ToyStream, gen_toy, gen_toy_redundant, gen_toy_second_order

__all__ = [
    "INV_SBOX", "SBOX", "AesStream", "SyntheticAesConfig", "SyntheticAesDevice",
    "gen_synthetic_aes", "hamming_weight", "inv_sbox", "lowpass_filter", "sbox",
    "cmi_oracle", "StandardizationStats", "TraceDataset", "load_dataset", "save_dataset",
    "split", "standardize_apply", "standardize_fit", "ToyConfig", "ToyStream", "gen_toy",
    "gen_toy_redundant", "gen_toy_second_order",
]
