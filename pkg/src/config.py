import logging
import os
from pathlib import Path

# Load .env from project root so seeds and worker counts can be pinned per machine
_env_path = Path(__file__).resolve().parent.parent / ".env"
if _env_path.exists():
    try:
        from dotenv import load_dotenv
        load_dotenv(_env_path)
    except ImportError:
        pass  # optional: pip install python-dotenv

TOOL_VERSION = "1.0.0"


class Config:
    MASTER_SEED = int(os.environ.get("PARASITE_SIM_SEED", "20240601"))
    WORKERS = int(os.environ.get("PARASITE_SIM_WORKERS", "1"))
    BLOCK_SIZE = int(os.environ.get("PARASITE_SIM_BLOCK_SIZE", "1000"))
    OUTPUT_DIR = os.environ.get("PARASITE_SIM_OUT", "runs")
    LOG_LEVEL = os.environ.get("PARASITE_SIM_LOG_LEVEL", "INFO").strip().upper()
    X_EXPLODE = float(os.environ.get("PARASITE_SIM_X_EXPLODE", "1e12"))
    MAX_CELLS = int(os.environ.get("PARASITE_SIM_MAX_CELLS", "100000"))
    DT = float(os.environ.get("PARASITE_SIM_DT", "1e-3"))
    TOL_FP = float(os.environ.get("PARASITE_SIM_TOL_FP", "1e-3"))
    K_MAX_FP = int(os.environ.get("PARASITE_SIM_K_MAX_FP", "20"))
    QUAD_TOL = float(os.environ.get("PARASITE_SIM_QUAD_TOL", "1e-10"))

    @property
    def output_path(self) -> Path:
        return Path(self.OUTPUT_DIR)


CFG = Config()

_logging_ready = False


def setup_logging(level: str | None = None):
    """Configure the root handler once; later calls only adjust the level."""
    global _logging_ready
    lvl = getattr(logging, (level or CFG.LOG_LEVEL).upper(), logging.INFO)
    if not _logging_ready:
        logging.basicConfig(
            level=lvl,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        _logging_ready = True
    logging.getLogger().setLevel(lvl)
