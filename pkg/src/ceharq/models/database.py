"""SQLAlchemy database setup for the run registry."""

from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.orm import DeclarativeBase, Session, sessionmaker

from ceharq.config import get_config


class Base(DeclarativeBase):
    """Base class for all models."""

    pass


_engine = None
_SessionLocal = None


def get_engine(db_path: Optional[Path] = None):
    """Get or create the database engine."""
    global _engine
    if _engine is None:
        if db_path is None:
            db_path = get_config().get_database_path()

        # Ensure directory exists
        db_path.parent.mkdir(parents=True, exist_ok=True)

        _engine = create_engine(f"sqlite:///{db_path}", echo=False)
    return _engine


def get_session_factory():
    """Get or create the session factory."""
    global _SessionLocal
    if _SessionLocal is None:
        _SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=get_engine())
    return _SessionLocal


@contextmanager
def get_session() -> Iterator[Session]:
    """Open a database session that is closed on exit."""
    SessionLocal = get_session_factory()
    session = SessionLocal()
    try:
        yield session
    finally:
        session.close()


def reset_engine() -> None:
    """Drop the cached engine so the next call honours a new config."""
    global _engine, _SessionLocal
    if _engine is not None:
        _engine.dispose()
    _engine = None
    _SessionLocal = None


def init_db() -> None:
    """Initialize database tables."""
    # Import models to register them
    from ceharq.models import experiment_run, summary_point  # noqa: F401

    Base.metadata.create_all(bind=get_engine())
