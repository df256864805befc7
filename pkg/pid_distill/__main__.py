from __future__ import annotations

from pid_distill.cli import main


if __name__ == "__main__":
    raise SystemExit(main())
