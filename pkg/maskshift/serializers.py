"""
Django REST Framework serializers for the maskshift app.

ExperimentConfigSerializer is the single validation point for experiment
parameters, whatever their source: command-line flags, key=value config
files or JSON posted to the API. The model serializers render runs and
their result rows.
"""

from collections.abc import Mapping

from django.conf import settings
from django.core.exceptions import ValidationError as DjangoValidationError
from rest_framework import serializers

from .decorrelation import DecorrMode
from .harness import FEATURE_EXAMPLE, FEATURE_SOURCES, ExperimentConfig
from .mask_gen import MissingPattern, check_level
from .models import ExperimentRun, ResultRecord
from .predictor import HeadKind
from .validators import validate_level_list, validate_missing_level

PATTERN_CHOICES = [pattern.value for pattern in MissingPattern]
MODE_CHOICES = [mode.value for mode in DecorrMode]
HEAD_CHOICES = [head.value for head in HeadKind]


class LevelListField(serializers.ListField):
    """
    A list of missing levels, accepted either as a JSON list or as a
    comma-separated string ("0.1,0.5,0.9").
    """

    child = serializers.FloatField()

    def to_internal_value(self, data):
        if isinstance(data, str):
            data = [item.strip() for item in data.split(',') if item.strip()]
        return super().to_internal_value(data)


def _run_validator(validator, value):
    try:
        validator(value)
    except DjangoValidationError as error:
        raise serializers.ValidationError(error.messages)


class ExperimentConfigSerializer(serializers.Serializer):
    """
    Validates experiment parameters and builds an ExperimentConfig.

    Every field is optional; omitted fields keep the ExperimentConfig
    defaults. Keys that are not fields are rejected.

    Validation Rules:
        - train_level and every listed level lie on the 0.1..0.9 grid
        - sizes, q, batch size and dimension are positive
        - gamma, epochs and weight iterations are nonnegative
        - MAR masks need dim >= 10, the duplicated-feature source dim >= 2
    """

    feature = serializers.ChoiceField(choices=FEATURE_SOURCES, required=False)
    pattern = serializers.ChoiceField(choices=PATTERN_CHOICES, required=False)
    train_pattern = serializers.ChoiceField(choices=PATTERN_CHOICES, required=False, allow_blank=True)
    test_pattern = serializers.ChoiceField(choices=PATTERN_CHOICES, required=False, allow_blank=True)
    dim = serializers.IntegerField(required=False, min_value=1)
    train_n = serializers.IntegerField(required=False, min_value=1)
    test_n = serializers.IntegerField(required=False, min_value=1)
    train_level = serializers.FloatField(required=False)
    train_levels = LevelListField(required=False, allow_empty=True)
    test_levels = LevelListField(required=False)
    mode = serializers.ChoiceField(choices=MODE_CHOICES, required=False)
    ablation = serializers.BooleanField(required=False)
    gamma = serializers.FloatField(required=False)
    q = serializers.IntegerField(required=False, min_value=1)
    head = serializers.ChoiceField(choices=HEAD_CHOICES, required=False)
    depth = serializers.IntegerField(required=False, min_value=0)
    width = serializers.IntegerField(required=False, min_value=1)
    epochs = serializers.IntegerField(required=False, min_value=0)
    batch_size = serializers.IntegerField(required=False, min_value=1)
    lr = serializers.FloatField(required=False, min_value=0)
    weight_lr = serializers.FloatField(required=False, min_value=0)
    weight_iters = serializers.IntegerField(required=False, min_value=0)
    snr = serializers.FloatField(required=False)
    coef_scale = serializers.FloatField(required=False, min_value=0)
    seed = serializers.IntegerField(required=False, min_value=0)
    seeds = serializers.IntegerField(required=False, min_value=1)
    workers = serializers.IntegerField(required=False, min_value=1)
    timing = serializers.BooleanField(required=False)
    out = serializers.CharField(required=False, allow_blank=True)
    export_dir = serializers.CharField(required=False, allow_blank=True)

    def to_internal_value(self, data):
        """Reject keys that are not configuration fields."""
        unknown = sorted(set(data) - set(self.fields)) if isinstance(data, Mapping) else []
        if unknown:
            raise serializers.ValidationError({
                key: ['Unknown configuration key.'] for key in unknown
            })
        return super().to_internal_value(data)

    def validate_train_level(self, value):
        """
        Args:
            value (float): The training level

        Returns:
            float: The matching grid value

        Raises:
            serializers.ValidationError: If the level is off the grid
        """
        _run_validator(validate_missing_level, value)
        return check_level(value)

    def validate_train_levels(self, value):
        """An empty list means "use train_level"; otherwise every entry must be a grid level."""
        if not value:
            return ()
        _run_validator(validate_level_list, value)
        return tuple(check_level(level) for level in value)

    def validate_test_levels(self, value):
        _run_validator(validate_level_list, value)
        return tuple(check_level(level) for level in value)

    def validate_gamma(self, value):
        if value < 0:
            raise serializers.ValidationError('gamma must be >= 0.')
        return value

    def validate_snr(self, value):
        if value <= 0:
            raise serializers.ValidationError('The signal-to-noise ratio must be positive.')
        return value

    def validate(self, attrs):
        """
        Cross-field rules that depend on the merged configuration.

        Raises:
            serializers.ValidationError: If the pattern or feature source needs a larger dim
        """
        merged = {**ExperimentConfig().as_dict(), **attrs}
        patterns = {merged['pattern'], merged['train_pattern'] or merged['pattern'],
                    merged['test_pattern'] or merged['pattern']}
        if MissingPattern.MAR.value in patterns and merged['dim'] < 10:
            raise serializers.ValidationError({
                'dim': 'MAR masks need dim >= 10 so that at least one anchor feature exists.'
            })
        if merged['feature'] == FEATURE_EXAMPLE and merged['dim'] < 2:
            raise serializers.ValidationError({
                'dim': 'The duplicated-feature source needs dim >= 2.'
            })
        return attrs

    def to_config(self):
        """Build the ExperimentConfig from validated data."""
        return ExperimentConfig(**self.validated_data)


class ApiExperimentConfigSerializer(ExperimentConfigSerializer):
    """
    Config accepted from the HTTP API: training size is capped by
    MASKSHIFT["API_MAX_TRAIN_N"] and server-side paths cannot be set.
    """

    def validate_train_n(self, value):
        limit = settings.MASKSHIFT['API_MAX_TRAIN_N']
        if value > limit:
            raise serializers.ValidationError(f'train_n is limited to {limit} through the API.')
        return value

    def validate_out(self, value):
        if value:
            raise serializers.ValidationError('Output paths cannot be set through the API.')
        return value

    def validate_export_dir(self, value):
        if value:
            raise serializers.ValidationError('Export directories cannot be set through the API.')
        return value


class ResultRecordSerializer(serializers.ModelSerializer):
    """Serializer for one result row."""

    class Meta:
        model = ResultRecord
        fields = [
            'mode',
            'train_level',
            'test_level',
            'rmse',
            'optimal_rmse',
            'gap',
            'seed',
            'wall_time_ms',
            'in_distribution',
        ]
        read_only_fields = fields


class ExperimentRunSerializer(serializers.ModelSerializer):
    """
    Serializer for the ExperimentRun model.

    On input only name, kind and config are accepted; config is validated by
    ApiExperimentConfigSerializer and stored in its normalized form.
    Status, error, timestamps and results are read-only.
    """

    results = ResultRecordSerializer(many=True, read_only=True)
    config = serializers.JSONField(required=False, default=dict)

    class Meta:
        model = ExperimentRun
        fields = [
            'id',
            'name',
            'kind',
            'status',
            'config',
            'error',
            'created_at',
            'finished_at',
            'results',
        ]
        read_only_fields = ['id', 'status', 'error', 'created_at', 'finished_at', 'results']

    def validate_config(self, value):
        """
        Args:
            value (dict): Raw configuration

        Returns:
            dict: The full configuration with defaults filled in

        Raises:
            serializers.ValidationError: With the per-field errors of the config
        """
        if value is None:
            value = {}
        if not isinstance(value, dict):
            raise serializers.ValidationError('config must be a JSON object.')
        config_serializer = ApiExperimentConfigSerializer(data=value)
        if not config_serializer.is_valid():
            raise serializers.ValidationError(config_serializer.errors)
        return config_serializer.to_config().as_dict()

    def validate(self, attrs):
        """
        Keep kind and config["ablation"] in agreement.

        Either one set to ablation makes the run an ablation; the stored
        config then always records ablation=True, and an experiment run
        always records ablation=False.
        """
        config = dict(attrs.get('config') or ExperimentConfig().as_dict())
        is_ablation = attrs.get('kind') == ExperimentRun.KIND_ABLATION or bool(config.get('ablation'))
        attrs['kind'] = ExperimentRun.KIND_ABLATION if is_ablation else ExperimentRun.KIND_EXPERIMENT
        config['ablation'] = is_ablation
        attrs['config'] = config
        return attrs


class ExperimentRunListSerializer(serializers.ModelSerializer):
    """Compact run listing without result rows."""

    result_count = serializers.IntegerField(source='results.count', read_only=True)

    class Meta:
        model = ExperimentRun
        fields = ['id', 'name', 'kind', 'status', 'created_at', 'finished_at', 'result_count']
        read_only_fields = fields
