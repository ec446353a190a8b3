import enum


class ErrorCode(str, enum.Enum):
    DIMENSION = 'DIMENSION'
    INDEX = 'INDEX'
    CAPACITY = 'CAPACITY'
    STATE = 'STATE'
    CONFIG = 'CONFIG'
    PLAN = 'PLAN'
    DATA = 'DATA'
    NOT_FOUND = 'NOT_FOUND'
    FROZEN = 'FROZEN'
    IO = 'IO'


EXIT_CODES = {
    ErrorCode.CONFIG: 2,
    ErrorCode.NOT_FOUND: 3,
    ErrorCode.PLAN: 4,
    ErrorCode.DATA: 5,
    ErrorCode.CAPACITY: 6,
    ErrorCode.DIMENSION: 7,
    ErrorCode.INDEX: 8,
    ErrorCode.STATE: 9,
    ErrorCode.FROZEN: 10,
    ErrorCode.IO: 11,
}


class EngineError(Exception):
    error_code = ErrorCode.STATE

    def __init__(self, error_code, message):
        Exception.__init__(self, message)
        self.message = message
        self.error_code = ErrorCode(error_code)

    @property
    def exit_code(self):
        return EXIT_CODES[self.error_code]

    def to_dict(self):
        res = dict()
        res['error'] = self.error_code.value
        res['message'] = self.message
        res['exit_code'] = self.exit_code
        return res
