"""
Shared Configuration Module for the FreeFix desk engine

This module provides the ambient configuration for every entry point (CLI, tests, scripts).
It loads environment variables from the root .env file and exposes them as class attributes,
plus the logging setup used across the package.

Usage:
    from shared_config import Config, configure_logging

    # Validate configuration
    if not Config.validate():
        exit(1)

    configure_logging()
    threads = Config.THREADS
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict

from dotenv import load_dotenv


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Config:
    """
    Environment-driven settings shared by the library and the CLI

    Loads environment variables from the root .env file. Run-specific numerics
    (guidance, refinement, pipeline) live in the structured models of freefix.config.
    """

    # Load environment variables from root .env file
    _env_path = Path(__file__).parent / ".env"
    load_dotenv(_env_path)

    # ====================
    # Logging Settings
    # ====================
    VERBOSE = _env_bool("FREEFIX_VERBOSE", "True")
    DEBUG = _env_bool("FREEFIX_DEBUG", "False")

    # ====================
    # Execution Settings
    # ====================
    THREADS = int(os.getenv("FREEFIX_THREADS", "1"))
    PIXEL_BUDGET = int(os.getenv("FREEFIX_PIXEL_BUDGET", "2000000"))

    # ====================
    # External Denoiser Bridge
    # ====================
    BRIDGE_TIMEOUT = float(os.getenv("FREEFIX_BRIDGE_TIMEOUT", "120"))
    BRIDGE_POLL = float(os.getenv("FREEFIX_BRIDGE_POLL", "0.05"))

    # ====================
    # Project Paths
    # ====================
    PROJECT_ROOT = Path(__file__).parent
    OUTPUT_DIR = Path(os.getenv("FREEFIX_OUTPUT_DIR", str(PROJECT_ROOT / "runs")))

    @classmethod
    def validate(cls) -> bool:
        """
        Validate that the environment settings are usable.

        Returns:
            bool: True if configuration is valid, False otherwise
        """
        problems = []
        if cls.THREADS < 1:
            problems.append(f"FREEFIX_THREADS must be >= 1 (got {cls.THREADS})")
        if cls.BRIDGE_TIMEOUT <= 0:
            problems.append(f"FREEFIX_BRIDGE_TIMEOUT must be > 0 (got {cls.BRIDGE_TIMEOUT})")
        if cls.BRIDGE_POLL <= 0:
            problems.append(f"FREEFIX_BRIDGE_POLL must be > 0 (got {cls.BRIDGE_POLL})")
        if cls.PIXEL_BUDGET < 1024:
            problems.append(f"FREEFIX_PIXEL_BUDGET must be >= 1024 (got {cls.PIXEL_BUDGET})")

        if problems:
            print("❌ ERROR: invalid FreeFix environment settings")
            for problem in problems:
                print(f"   - {problem}")
            print("\n📋 Fix the values in the .env file at the project root or unset them to use defaults.")
            return False
        return True

    @classmethod
    def to_dict(cls) -> Dict[str, Any]:
        """
        Export all configuration as a dictionary.

        Returns:
            Dict[str, Any]: Dictionary containing all configuration values
        """
        return {
            "verbose": cls.VERBOSE,
            "debug": cls.DEBUG,
            "threads": cls.THREADS,
            "pixel_budget": cls.PIXEL_BUDGET,
            "bridge_timeout": cls.BRIDGE_TIMEOUT,
            "bridge_poll": cls.BRIDGE_POLL,
            "output_dir": str(cls.OUTPUT_DIR),
        }

    @classmethod
    def print_summary(cls) -> None:
        """
        Print a summary of the current configuration.
        """
        print("\n" + "=" * 60)
        print("📋 FreeFix Configuration Summary")
        print("=" * 60)
        print(f"✓ Verbose:           {cls.VERBOSE}")
        print(f"✓ Debug:             {cls.DEBUG}")
        print(f"✓ Threads:           {cls.THREADS}")
        print(f"✓ Pixel budget:      {cls.PIXEL_BUDGET}")
        print(f"✓ Bridge timeout:    {cls.BRIDGE_TIMEOUT}s")
        print(f"✓ Output directory:  {cls.OUTPUT_DIR}")
        print("=" * 60 + "\n")


def configure_logging(verbose: bool = None, debug: bool = None) -> None:
    """Configure root logging from the environment (or explicit overrides)."""
    verbose = Config.VERBOSE if verbose is None else verbose
    debug = Config.DEBUG if debug is None else debug
    level = logging.DEBUG if debug else (logging.INFO if verbose else logging.WARNING)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    logging.getLogger("freefix").setLevel(level)
    # plyfile and matplotlib are chatty at DEBUG
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def validate_config() -> bool:
    """Quick function to validate configuration."""
    return Config.validate()


def progress_enabled() -> bool:
    """Whether tqdm progress bars should be shown."""
    return Config.VERBOSE


if __name__ == "__main__":
    """
    Test the configuration module.
    Run this file to verify that configuration is properly loaded:
        python shared_config.py
    """
    print("🧪 Testing Shared Configuration Module")
    print("-" * 60)

    if Config.validate():
        print("✅ Configuration validation passed!\n")
        Config.print_summary()
    else:
        print("❌ Configuration validation failed!")
        exit(1)
