"""
Test configuration and fixtures for the tracer toolkit
"""

import os
from pathlib import Path
import sys

from dotenv import load_dotenv
import numpy as np
import pytest

# Load environment variables for tests
load_dotenv()

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from models import Atoms, DrivingModel, SymmetricStable, TracerModel
from services.ergodic import ErgodicService
from services.generator import GeneratorService
from services.simulate import PathSimulator
from services.stats import StatsService
from services.symbols import SymbolService
from services.torus import constant, cosine, sine

TWO_PI = 2.0 * np.pi
CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def config_dir():
    """Directory of the shipped example configurations"""
    return CONFIG_DIR


@pytest.fixture
def period():
    return (TWO_PI,)


@pytest.fixture
def rm3_model(period):
    """Random walk on Z: jumps of +-1 at rate 1 each"""
    return DrivingModel(dim=1, jumps=Atoms([[-1.0], [1.0]], [1.0, 1.0]), period=period, name="rm3")


@pytest.fixture
def brownian_model(period):
    """Standard Brownian motion, c = 1"""
    return DrivingModel(dim=1, diffusion=[[1.0]], period=period, name="brownian")


@pytest.fixture
def stable_model(period):
    """Symmetric 1.5-stable process with symbol |xi|^1.5"""
    return DrivingModel(dim=1, jumps=SymmetricStable(1.5, 1.0), period=period, name="stable")


@pytest.fixture
def pure_drift_model(period):
    """Deterministic rotation L_t = L_0 + t"""
    return DrivingModel(dim=1, drift=[1.0], period=period, name="pure_drift")


@pytest.fixture
def sin_w(period):
    return sine(period)


@pytest.fixture
def cos_w(period):
    return cosine(period)


@pytest.fixture
def const_w(period):
    return constant(3.0, period)


@pytest.fixture
def rm3_tracer(rm3_model, sin_w):
    return TracerModel(rm3_model, [sin_w])


@pytest.fixture
def symbols():
    return SymbolService()


@pytest.fixture
def generator(symbols):
    return GeneratorService(symbols)


@pytest.fixture
def simulator(generator):
    """Small chunks so short ensembles still span several chunks"""
    return PathSimulator(generator, chunk_paths=8)


@pytest.fixture
def ergodic(generator, simulator):
    return ErgodicService(generator, simulator)


@pytest.fixture
def stats(simulator):
    return StatsService(simulator)


@pytest.fixture
def write_config(tmp_path):
    """Write a TOML string to a temporary file and return its path"""

    def _write(text, name="experiment.toml"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write
