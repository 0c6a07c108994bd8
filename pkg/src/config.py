"""
Configuración del entorno y del logging
"""
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv


@dataclass(frozen=True)
class Settings:
    """Parámetros leídos del entorno (.env opcional)"""
    log_level: str = "INFO"
    output_dir: Path = Path("out")
    sdp_solver: str = "CLARABEL"
    psd_tolerance: float = 1e-7
    default_seed: int = 0


def load_settings(env_file: str = ".env") -> Settings:
    """
    Carga la configuración desde variables de entorno

    Args:
        env_file: Archivo .env (se ignora si no existe)

    Returns:
        Settings con los valores efectivos
    """
    load_dotenv(env_file, override=False)

    return Settings(
        log_level=os.getenv("LOG_LEVEL", "INFO").upper(),
        output_dir=Path(os.getenv("BOOST_OUTPUT_DIR", "out")),
        sdp_solver=os.getenv("BOOST_SDP_SOLVER", "CLARABEL").upper(),
        psd_tolerance=float(os.getenv("BOOST_PSD_TOLERANCE", "1e-7")),
        default_seed=int(os.getenv("BOOST_SEED", "0")),
    )


def configure_logging(level: str = "INFO") -> None:
    """Instala un único handler de consola para el paquete"""
    root = logging.getLogger("src")
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
        )
        root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.INFO))
