import os

from sqlalchemy.engine import Engine
from sqlmodel import Session, SQLModel, create_engine

from avalign.models import BatchRun, PairOutcome  # noqa: F401

DATABASE_URL = os.environ.get("AVALIGN_DATABASE_URL", "sqlite:///avalign_runs.db")


def _engine(url: str) -> Engine:
    if url.startswith("sqlite"):
        return create_engine(url, connect_args={"check_same_thread": False})
    return create_engine(url, connect_args={"connect_timeout": 15})


ENGINE = _engine(DATABASE_URL)


def use_database(url: str) -> None:
    """Point the registry at another database URL"""
    global ENGINE
    ENGINE.dispose()
    ENGINE = _engine(url)


def create_tables():
    SQLModel.metadata.create_all(ENGINE)


def get_session():
    return Session(ENGINE)


def reset_db():
    """Wipe all tables in the database. Use with caution - for testing only!"""
    SQLModel.metadata.drop_all(ENGINE)
    SQLModel.metadata.create_all(ENGINE)
