import logging
import os
from typing import Literal

from dotenv import load_dotenv
from rich.logging import RichHandler

load_dotenv(override=True)

LoggingLevel = Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL", "NOTSET"]

LOGGER_NAME = "rich"


def _rich_logger(level: int = logging.INFO) -> logging.Logger:
    """The package logger with exactly one rich handler attached."""
    logger = logging.getLogger(LOGGER_NAME)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.addHandler(RichHandler(rich_tracebacks=True, markup=True))
    logger.setLevel(level)
    logger.propagate = False
    return logger


class Settings:
    """
    Runtime settings shared by the fitting, search and bootstrap routines:

    - the logger and its level,
    - `N_JOBS`, the number of joblib workers for independent starts, search cells and
      bootstrap replicates,
    - `AIS_DATA_PATH`, the AIS athletes file used by the data-dependent tests.

    Importing mixsur creates a global `settings` object (`mixsur.config.settings`),
    filled from the environment and from a `.env` file if one is present.

    `fit`, `search` and `parametric_bootstrap` accept a Settings object of their own;
    when one is passed, the global object is not consulted.
    """

    def __init__(self):
        self.base_init()

    def base_init(self):
        self.N_JOBS: int = 1
        self.AIS_DATA_PATH: str = ""
        self.LOGGING_LEVEL: str = "INFO"
        self.LOGGING_LEVEL_INT: int = logging.INFO
        self.logger = _rich_logger(self.LOGGING_LEVEL_INT)

        # joblib reports every batch at INFO
        logging.getLogger("joblib").setLevel(logging.WARNING)

    def configure_logger(self, level: LoggingLevel = "NOTSET"):
        """
        Set the level of the mixsur logger.

        Args:
            level (LoggingLevel): one of "DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL", "NOTSET".
        """
        self.LOGGING_LEVEL = level
        self.LOGGING_LEVEL_INT = logging.getLevelNamesMapping()[level]
        self.logger.setLevel(self.LOGGING_LEVEL_INT)

    @classmethod
    def from_env_vars(cls):
        settings = cls()
        settings.set_from_env()
        return settings

    def set_from_env(self):
        """Read MIXSUR_N_JOBS, AIS_DATA_PATH and MIXSUR_LOGGING_LEVEL."""
        self.N_JOBS = int(os.getenv("MIXSUR_N_JOBS", "1"))
        self.AIS_DATA_PATH = os.getenv("AIS_DATA_PATH", "")
        level = os.getenv("MIXSUR_LOGGING_LEVEL")
        if level:
            self.configure_logger(level.upper())  # type: ignore

    def configure(self, replace: bool = False, **kwargs):
        """
        Change the settings of this object. Keyword names are case-insensitive.

        Args:
            replace (bool): start again from the defaults before applying `kwargs`.
            **kwargs:
                - logging_level (str): e.g. "DEBUG" or "WARNING".
                - n_jobs (int): joblib workers; 1 runs in-process, -1 uses every core.
                    Results do not depend on this value.
                - ais_data_path (str): location of the AIS data file.

        Unknown keywords are ignored with a warning.
        """
        if replace:
            self.base_init()

        options = {key.lower(): value for key, value in kwargs.items()}

        level = options.pop("logging_level", None)
        if level is not None:
            self.configure_logger(level)

        if "n_jobs" in options:
            n_jobs = int(options.pop("n_jobs"))
            if n_jobs == 0:
                raise ValueError("n_jobs must be a non-zero integer (use -1 for all cores).")
            self.N_JOBS = n_jobs

        if "ais_data_path" in options:
            self.AIS_DATA_PATH = str(options.pop("ais_data_path"))

        if options:
            self.logger.warning(
                f"Unknown arguments to configure: {', '.join(options)}"
            )

    def __repr__(self) -> str:
        return (
            f"Logging level: {self.LOGGING_LEVEL}\n"
            f"Parallel jobs: {self.N_JOBS}\n"
            f"AIS data path: {self.AIS_DATA_PATH or 'not set'}\n"
        )

    def to_json(self) -> dict:
        return {
            "N_JOBS": self.N_JOBS,
            "AIS_DATA_PATH": self.AIS_DATA_PATH,
            "LOGGING_LEVEL": self.LOGGING_LEVEL,
            "LOGGING_LEVEL_INT": self.LOGGING_LEVEL_INT,
        }

    @classmethod
    def from_json(cls, json_data: dict):
        settings = cls()
        settings.N_JOBS = int(json_data.get("N_JOBS", 1))
        settings.AIS_DATA_PATH = json_data.get("AIS_DATA_PATH", "")
        settings.configure_logger(json_data.get("LOGGING_LEVEL", "INFO"))
        return settings


# global settings used when mixsur is imported as a package
settings = Settings()
settings.set_from_env()


def set_from_env() -> None:
    settings.set_from_env()


def reset_settings() -> None:
    """Restore the global settings to the defaults and the environment."""
    settings.base_init()
    settings.set_from_env()


def configure(**kwargs) -> None:
    """
    Configure the global settings object. See `Settings.configure`.
    """
    settings.configure(**kwargs)
