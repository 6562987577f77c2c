#!/usr/bin/env python
"""
Command-line entry point for the MaskShift project.

    python manage.py run_experiment --help
    python manage.py test --exclude-tag slow
"""
import os
import sys


def main():
    """Run administrative and experiment commands."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'config.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Install requirements.txt into the active "
            "environment before running MaskShift commands."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
