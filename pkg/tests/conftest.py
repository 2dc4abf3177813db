import numpy as np
import pytest

from sftsim.compression.surrogate import (
    calibrate_predictor,
    fit_accuracy_surface,
    measure_rate_grid,
    synthetic_accuracy_observations,
)
from sftsim.profiles import ModelProfile, SplitConfig
from sftsim.wireless import DeviceProfile, ServerProfile, SnrModel

RHO_GRID = np.round(0.05 + 0.05 * np.arange(20), 10)
LEVEL_GRID = (2, 4, 8, 16, 32)


@pytest.fixture(scope="session")
def vit_profile():
    return ModelProfile(
        num_layers=12,
        embed_dim=768,
        num_heads=12,
        num_tokens=197,
        patch_size=16,
        img_channels=3,
        num_classes=100,
        lora_rank=16,
    )


@pytest.fixture(scope="session")
def table_split():
    return SplitConfig(cut_layer=5, batch=64, local_epochs=1, rounds=20)


@pytest.fixture(scope="session")
def rate_predictor():
    samples = measure_rate_grid(RHO_GRID, LEVEL_GRID, shape=(128, 128), seed=99)
    return calibrate_predictor(samples)


@pytest.fixture(scope="session")
def accuracy_surface():
    return fit_accuracy_surface(synthetic_accuracy_observations(RHO_GRID, LEVEL_GRID))


def make_devices(num, seed=0, freq_range=(0.5e9, 1.5e9), bandwidth_cap=30e6, snr_nominal=17.0):
    rng = np.random.default_rng(seed)
    devices = []
    for i in range(num):
        devices.append(
            DeviceProfile(
                id=f"dev{i}",
                gpu_freq_hz=float(rng.uniform(*freq_range)),
                cores=256,
                flops_per_cycle=4,
                bandwidth_max_hz=bandwidth_cap,
                dataset_size=int(rng.integers(1000, 10000)),
                snr_model=SnrModel(nominal_db=snr_nominal),
            )
        )
    return tuple(devices)


def make_server(total_bandwidth=30e6, gpu_freq=40e9):
    return ServerProfile(
        gpu_freq_hz=gpu_freq,
        cores=2048,
        flops_per_cycle=4,
        total_bandwidth_hz=total_bandwidth,
        broadcast_bandwidth_hz=total_bandwidth,
        snr_downlink_db=17.0,
    )
