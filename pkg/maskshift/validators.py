"""
Custom validators for the maskshift app.

Reusable validation functions for experiment parameters, shared by the
config serializer and the models.
"""

from django.core.exceptions import ValidationError

from .mask_gen import MISSING_LEVELS


def validate_missing_level(value):
    """
    Validate that a missing level lies on the grid 0.1, 0.2, ..., 0.9.

    Args:
        value (float): The level to validate

    Raises:
        ValidationError: If the level is off the grid

    Example:
        >>> validate_missing_level(0.3)  # No error
        >>> validate_missing_level(0.35)  # Raises ValidationError
    """
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f'Missing level "{value}" is not a number.')

    if not any(abs(number - level) < 1e-9 for level in MISSING_LEVELS):
        raise ValidationError(
            f'Invalid missing level {value}. '
            f'Levels must be one of: {", ".join(str(level) for level in MISSING_LEVELS)}.'
        )


def validate_level_list(values):
    """
    Validate a nonempty list of grid levels without duplicates.

    Args:
        values (list): The levels to validate

    Raises:
        ValidationError: If the list is empty, repeats a level or holds an off-grid level

    Example:
        >>> validate_level_list([0.1, 0.5, 0.9])  # No error
        >>> validate_level_list([])  # Raises ValidationError
    """
    if not values:
        raise ValidationError('At least one missing level is required.')

    for value in values:
        validate_missing_level(value)

    rounded = [round(float(value), 1) for value in values]
    if len(set(rounded)) != len(rounded):
        raise ValidationError('Missing levels must not repeat.')
