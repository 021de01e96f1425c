"""
Sliced Attention - ReLU attention in O(n log n) by sorting projected scores
Main command-line entry point.

This toolkit combines:
- Sorted-scan forward and backward passes for sliced ReLU and ReLU-bump attention
- Dense oracles, finite-difference gradient checks and kernel diagnostics
- A constructive sequence matching engine and a benchmark harness

License: MIT
"""

import sys
from typing import Optional, Sequence

from src.cli import run_command
from src.config import Config
from src.errors import SlicedAttentionError


def print_banner():
    """Print application banner."""
    print("=" * 60)
    print("🔀 Sliced Attention - ReLU attention by sort and scan")
    print("=" * 60)
    print()


def check_prerequisites() -> bool:
    """
    Check if the environment configuration is usable.

    Returns:
        bool: True if all prerequisites are met
    """
    is_valid, error_msg = Config.validate_config()
    if not is_valid:
        print(f"❌ Configuration error: {error_msg}")
        return False
    return True


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        int: 0 success, 1 failed property check, 2 bad input or configuration,
        3 shape mismatch or empty input, 4 numerical or contract failure
    """
    try:
        print_banner()

        if not check_prerequisites():
            print("\n❌ Prerequisites check failed. Please fix the errors above.")
            return 2

        return run_command(argv)

    except SystemExit as e:
        # argparse usage errors and --help
        return e.code if isinstance(e.code, int) else 2
    except SlicedAttentionError as e:
        print(f"\n❌ {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("\n\n👋 Interrupted. Goodbye!")
        return 130
    except Exception as e:
        print(f"\n❌ Unexpected error: {str(e)}")
        print("\n💡 Troubleshooting tips:")
        print("   1. Re-run with --verbose to see progress logs")
        print("   2. Check the input and parameter files against the README formats")
        print("   3. Verify all dependencies are installed: pip install -r requirements.txt")
        return 1


if __name__ == "__main__":
    sys.exit(main())
