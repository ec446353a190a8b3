from marshmallow import RAISE, Schema, ValidationError, fields, post_load, validate, validates_schema
from marshmallow_enum import EnumField

from core.config import (ActivationEnum, BaselineConfig, BenchConfig, DataConfig, GranularityEnum, ModelConfig,
                         MoEConfig, PlanConfig, PretrainConfig, RunConfig, TargetEnum, TrainConfig)

POSITIVE = validate.Range(min=1)
FRACTION = validate.Range(min=0.0, max=1.0)


class MoEConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    n_experts = fields.Integer(validate=POSITIVE)
    top_k = fields.Integer(validate=POSITIVE)
    expert_hidden = fields.Integer(validate=POSITIVE)
    renormalize = fields.Boolean()

    @validates_schema
    def validate_top_k(self, data, **kwargs):
        # pylint: disable=unused-argument,no-self-use
        if data.get('top_k', 2) > data.get('n_experts', 8):
            raise ValidationError('top_k must not exceed n_experts', 'top_k')

    @post_load
    def initiate_class(self, data_dict, many, partial):
        # pylint: disable=unused-argument,no-self-use
        return MoEConfig(**data_dict)


class ModelConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    vocab_size = fields.Integer(validate=POSITIVE)
    d_model = fields.Integer(validate=POSITIVE)
    n_layers = fields.Integer(validate=POSITIVE)
    n_heads = fields.Integer(validate=POSITIVE)
    head_dim = fields.Integer(validate=POSITIVE)
    mlp_hidden = fields.Integer(validate=POSITIVE)
    max_seq_len = fields.Integer(validate=POSITIVE)
    activation = EnumField(ActivationEnum, by_value=True)
    rope_base = fields.Float(validate=validate.Range(min=1.0))
    norm_eps = fields.Float(validate=validate.Range(min=0.0, min_inclusive=False))
    moe = fields.Nested(MoEConfigSchema, allow_none=True)

    @validates_schema
    def validate_heads(self, data, **kwargs):
        # pylint: disable=unused-argument,no-self-use
        defaults = ModelConfig()
        d_model = data.get('d_model', defaults.d_model)
        if data.get('n_heads', defaults.n_heads) * data.get('head_dim', defaults.head_dim) != d_model:
            raise ValidationError('d_model must equal n_heads * head_dim', 'd_model')

    @post_load
    def initiate_class(self, data_dict, many, partial):
        # pylint: disable=unused-argument,no-self-use
        return ModelConfig(**data_dict)


class PlanConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    target = EnumField(TargetEnum, by_value=True)
    granularity = EnumField(GranularityEnum, by_value=True)
    layers = fields.List(fields.Integer(validate=validate.Range(min=0)), allow_none=True)
    n_routed = fields.Integer(validate=POSITIVE, allow_none=True)
    tau = fields.Float(validate=FRACTION)
    causal_prefix = fields.Boolean()
    allow_last = fields.Boolean()

    @post_load
    def initiate_class(self, data_dict, many, partial):
        # pylint: disable=unused-argument,no-self-use
        return PlanConfig(**data_dict)


class TrainConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    learning_rate = fields.Float(validate=validate.Range(min=0.0))
    lam = fields.Float(data_key='lambda', validate=validate.Range(min=0.0))
    target_capacity = fields.Float(validate=FRACTION)
    steps = fields.Integer(validate=validate.Range(min=0))
    batch_size = fields.Integer(validate=POSITIVE)
    seq_len = fields.Integer(validate=POSITIVE)
    seed = fields.Integer()
    max_windows = fields.Integer(validate=POSITIVE, allow_none=True)
    lr_grid = fields.List(fields.Float(validate=validate.Range(min=0.0)), validate=validate.Length(min=1))
    lambda_grid = fields.List(fields.Float(validate=validate.Range(min=0.0)), validate=validate.Length(min=1))
    capacity_tolerance = fields.Float(validate=FRACTION)
    grid_steps = fields.Integer(validate=validate.Range(min=0), allow_none=True)
    workers = fields.Integer(validate=POSITIVE)

    @post_load
    def initiate_class(self, data_dict, many, partial):
        # pylint: disable=unused-argument,no-self-use
        return TrainConfig(**data_dict)


class PretrainConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    steps = fields.Integer(validate=validate.Range(min=0))
    learning_rate = fields.Float(validate=validate.Range(min=0.0))
    batch_size = fields.Integer(validate=POSITIVE)

    @post_load
    def initiate_class(self, data_dict, many, partial):
        # pylint: disable=unused-argument,no-self-use
        return PretrainConfig(**data_dict)


class DataConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    corpus_path = fields.String(allow_none=True)
    val_fraction = fields.Float(validate=validate.Range(min=0.0, max=1.0, max_inclusive=False))
    synthetic_sentences = fields.Integer(validate=POSITIVE)

    @post_load
    def initiate_class(self, data_dict, many, partial):
        # pylint: disable=unused-argument,no-self-use
        return DataConfig(**data_dict)


class BenchConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    batch_size = fields.Integer(validate=POSITIVE)
    seq_len = fields.Integer(validate=POSITIVE)
    gen_len = fields.Integer(validate=validate.Range(min=0))
    repeats = fields.Integer(validate=POSITIVE)
    workers = fields.Integer(validate=POSITIVE)
    eval_windows = fields.Integer(validate=POSITIVE, allow_none=True)

    @post_load
    def initiate_class(self, data_dict, many, partial):
        # pylint: disable=unused-argument,no-self-use
        return BenchConfig(**data_dict)


class BaselineConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    drop_target = EnumField(TargetEnum, by_value=True)
    drop_count = fields.Integer(validate=validate.Range(min=0))
    expert_drop_fraction = fields.Float(validate=validate.Range(min=0.0, max=1.0, max_inclusive=False))
    calibration_size = fields.Integer(validate=POSITIVE)

    @post_load
    def initiate_class(self, data_dict, many, partial):
        # pylint: disable=unused-argument,no-self-use
        return BaselineConfig(**data_dict)


class RunConfigSchema(Schema):
    class Meta:
        unknown = RAISE
        ordered = True

    seed = fields.Integer()
    model = fields.Nested(ModelConfigSchema)
    plan = fields.Nested(PlanConfigSchema)
    train = fields.Nested(TrainConfigSchema)
    pretrain = fields.Nested(PretrainConfigSchema)
    data = fields.Nested(DataConfigSchema)
    bench = fields.Nested(BenchConfigSchema)
    baseline = fields.Nested(BaselineConfigSchema)

    @post_load
    def initiate_class(self, data_dict, many, partial):
        # pylint: disable=unused-argument,no-self-use
        return RunConfig(**data_dict)
