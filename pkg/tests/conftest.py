"""Pytest fixtures for ceharq tests."""

import tempfile
from pathlib import Path

import numpy as np
import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from ceharq.config import AppConfig, set_config
from ceharq.models.database import Base, reset_engine
from ceharq.services.channel import ChannelConfig
from ceharq.services.fec import FecKind, FecScheme, RateFamily


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def test_config(temp_dir):
    """Create a test configuration."""
    config = AppConfig()
    config.database.path = str(temp_dir / "test.db")
    config.simulation.out_dir = str(temp_dir / "results")
    config.simulation.progress = False
    config.simulation.chunk_size = 16
    set_config(config)
    reset_engine()
    yield config
    reset_engine()


@pytest.fixture
def db_session(test_config):
    """Create an in-memory database session for testing."""
    engine = create_engine("sqlite:///:memory:")
    Base.metadata.create_all(engine)
    SessionLocal = sessionmaker(bind=engine)
    session = SessionLocal()
    yield session
    session.close()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def uncoded():
    return FecScheme(kind=FecKind.UNCODED, k=200)


@pytest.fixture
def conv():
    """Rate-1/2, constraint length 7, generators (133, 171)."""
    return FecScheme(kind=FecKind.CONVOLUTIONAL, k=200)


@pytest.fixture
def ldpc():
    """Rate-3/4 QC-LDPC with Z = 20 (K = 240, N = 320)."""
    return FecScheme(kind=FecKind.LDPC, k=240)


@pytest.fixture
def family():
    return RateFamily.from_denominators()


@pytest.fixture
def clean_channel():
    return ChannelConfig(snr_db=float("inf"), seed=7)


@pytest.fixture
def write_sim(temp_dir):
    """Write a flat simulation config and return its path."""

    def _write(name: str = "sim.conf", **values) -> Path:
        path = temp_dir / name
        path.write_text("".join(f"{key} = {value}\n" for key, value in values.items()))
        return path

    return _write
