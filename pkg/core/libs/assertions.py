from .exceptions import EngineError, ErrorCode


def base_assert(error_code, msg):
    raise EngineError(error_code=error_code, message=msg)


def assert_shape(cond, msg='DIMENSION_MISMATCH'):
    if cond is False:
        base_assert(ErrorCode.DIMENSION, msg)


def assert_index(cond, msg='INDEX_OUT_OF_RANGE'):
    if cond is False:
        base_assert(ErrorCode.INDEX, msg)


def assert_capacity(cond, msg='CAPACITY_EXCEEDED'):
    if cond is False:
        base_assert(ErrorCode.CAPACITY, msg)


def assert_state(cond, msg='INVALID_STATE'):
    if cond is False:
        base_assert(ErrorCode.STATE, msg)


def assert_config(cond, msg='INVALID_CONFIG'):
    if cond is False:
        base_assert(ErrorCode.CONFIG, msg)


def assert_plan(cond, msg='INVALID_PLAN'):
    if cond is False:
        base_assert(ErrorCode.PLAN, msg)


def assert_data(cond, msg='INVALID_DATA'):
    if cond is False:
        base_assert(ErrorCode.DATA, msg)


def assert_frozen(cond, msg='BACKBONE_MODIFIED'):
    if cond is False:
        base_assert(ErrorCode.FROZEN, msg)


def assert_found(_obj, msg='NOT_FOUND'):
    if _obj is None:
        base_assert(ErrorCode.NOT_FOUND, msg)
