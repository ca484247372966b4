"""
Logging colorido con emojis para seguir los cálculos en consola.

Cada tipo de trabajo numérico tiene su estilo (solver, step, event, sweep, io)
y los mensajes pueden llevar campos clave=valor:

    logger.step("avance", t=12.5, pasos=24000)
    # 00:00:03.21 ⏱️ STEP [metastable.services.pde_service] avance · t=12.5 pasos=24000

Todo sale por stderr; stdout queda para el JSON de resultados.
"""
import logging
import sys
from dataclasses import dataclass
from typing import Any, Dict, Optional


class Colors:
    """Códigos ANSI usados por el logger y el banner."""
    RESET = '\033[0m'
    BOLD = '\033[1m'
    DIM = '\033[2m'

    RED = '\033[31m'
    YELLOW = '\033[33m'
    MAGENTA = '\033[35m'
    CYAN = '\033[36m'
    WHITE = '\033[37m'

    BRIGHT_RED = '\033[91m'
    BRIGHT_GREEN = '\033[92m'
    BRIGHT_YELLOW = '\033[93m'
    BRIGHT_BLUE = '\033[94m'
    BRIGHT_MAGENTA = '\033[95m'
    BRIGHT_CYAN = '\033[96m'
    BRIGHT_WHITE = '\033[97m'

    BG_RED = '\033[41m'


@dataclass(frozen=True)
class LogStyle:
    emoji: str
    color: str
    label: str
    level: int = logging.INFO

    def prefix(self, use_colors: bool) -> str:
        text = f"{self.emoji} {self.label}"
        return f"{self.color}{text}{Colors.RESET}" if use_colors else text


STYLES: Dict[str, LogStyle] = {
    'DEBUG': LogStyle('🔍', Colors.CYAN, 'DEBUG', logging.DEBUG),
    'INFO': LogStyle('ℹ️ ', Colors.BRIGHT_BLUE, 'INFO'),
    'WARNING': LogStyle('⚠️ ', Colors.YELLOW, 'WARNING', logging.WARNING),
    'ERROR': LogStyle('❌', Colors.RED, 'ERROR', logging.ERROR),
    'CRITICAL': LogStyle('💥', Colors.BG_RED + Colors.WHITE, 'CRITICAL', logging.CRITICAL),

    'STARTUP': LogStyle('🚀', Colors.BRIGHT_GREEN, 'STARTUP'),
    'SHUTDOWN': LogStyle('🛑', Colors.BRIGHT_RED, 'SHUTDOWN'),
    'SUCCESS': LogStyle('✅', Colors.BRIGHT_GREEN, 'SUCCESS'),
    # raíces, cuadraturas y Newton: sólo en DEBUG, son muchas líneas
    'SOLVER': LogStyle('🧮', Colors.MAGENTA, 'SOLVER', logging.DEBUG),
    'STEP': LogStyle('⏱️ ', Colors.WHITE, 'STEP'),
    'EVENT': LogStyle('📨', Colors.BRIGHT_YELLOW, 'EVENT'),
    'SWEEP': LogStyle('🧪', Colors.BRIGHT_CYAN, 'SWEEP'),
    'IO': LogStyle('💾', Colors.BRIGHT_MAGENTA, 'IO'),
}

# kwargs que van a logging.Logger.log; el resto son campos del mensaje
_LOGGING_KWARGS = {'exc_info', 'stack_info', 'stacklevel', 'extra'}


def _format_field(value: Any) -> str:
    if isinstance(value, float):
        return format(value, '.6g')
    return str(value)


def _elapsed(ms: float) -> str:
    """hh:mm:ss.cc desde el arranque del proceso."""
    seconds, cents = divmod(int(ms // 10), 100)
    minutes, seconds = divmod(seconds, 60)
    hours, minutes = divmod(minutes, 60)
    return f"{hours:02d}:{minutes:02d}:{seconds:02d}.{cents:02d}"


class SexyFormatter(logging.Formatter):
    """Prefijo con tiempo transcurrido, emoji y color; campos clave=valor al final."""

    def __init__(self, use_colors: bool = True, show_time: bool = True, show_name: bool = True):
        super().__init__()
        self.use_colors = use_colors
        self.show_time = show_time
        self.show_name = show_name

    def _dim(self, text: str) -> str:
        return f"{Colors.DIM}{text}{Colors.RESET}" if self.use_colors else text

    def format(self, record: logging.LogRecord) -> str:
        style = STYLES.get(getattr(record, 'style_name', record.levelname), STYLES['INFO'])

        parts = []
        if self.show_time:
            parts.append(self._dim(_elapsed(record.relativeCreated)))
        parts.append(style.prefix(self.use_colors))
        if self.show_name:
            parts.append(self._dim(f"[{record.name}]"))
        parts.append(record.getMessage())

        fields = getattr(record, 'fields', None)
        if fields:
            parts.append(self._dim("·") + " " + " ".join(f"{k}={_format_field(v)}" for k, v in fields.items()))

        formatted = " ".join(parts)
        if record.exc_info:
            formatted += "\n" + self.formatException(record.exc_info)
        return formatted


class SexyLogger:
    """
    Logger con estilos del dominio numérico.

    Uso:
        logger = get_logger(__name__)
        logger.solver("brentq", r=0.05, iteraciones=12)
        logger.event("ends_exit", t=48.2)
    """

    def __init__(
        self,
        name: str = __name__,
        level: Optional[int] = None,
        use_colors: Optional[bool] = None,
        show_time: bool = True,
        show_name: bool = True
    ):
        """
        Args:
            name: Nombre del logger
            level: Nivel de logging; por defecto Settings.LOG_LEVEL
            use_colors: Si usar colores; por defecto Settings.LOG_COLORS
            show_time: Si mostrar el tiempo transcurrido
            show_name: Si mostrar el nombre del logger
        """
        if level is None or use_colors is None:
            settings_level, settings_colors = _settings_defaults()
            level = settings_level if level is None else level
            use_colors = settings_colors if use_colors is None else use_colors

        self.logger = logging.getLogger(name)
        self.logger.setLevel(level)

        # un solo handler por nombre aunque get_logger se llame varias veces
        if not self.logger.handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(SexyFormatter(use_colors, show_time, show_name))
            self.logger.addHandler(handler)
            self.logger.propagate = False

    def _log(self, style_name: str, message: str, **kwargs):
        style = STYLES[style_name]
        if not self.logger.isEnabledFor(style.level):
            return
        options = {k: kwargs.pop(k) for k in list(kwargs) if k in _LOGGING_KWARGS}
        extra = dict(options.pop('extra', None) or {})
        extra['style_name'] = style_name
        extra['fields'] = kwargs
        self.logger.log(style.level, message, extra=extra, **options)

    def debug(self, message: str, **kwargs):
        self._log('DEBUG', message, **kwargs)

    def info(self, message: str, **kwargs):
        self._log('INFO', message, **kwargs)

    def warning(self, message: str, **kwargs):
        self._log('WARNING', message, **kwargs)

    def error(self, message: str, **kwargs):
        self._log('ERROR', message, **kwargs)

    def critical(self, message: str, **kwargs):
        self._log('CRITICAL', message, **kwargs)

    def startup(self, message: str, **kwargs):
        self._log('STARTUP', message, **kwargs)

    def shutdown(self, message: str, **kwargs):
        self._log('SHUTDOWN', message, **kwargs)

    def success(self, message: str, **kwargs):
        self._log('SUCCESS', message, **kwargs)

    def solver(self, message: str, **kwargs):
        """Raíces, cuadraturas, proyecciones de Newton."""
        self._log('SOLVER', message, **kwargs)

    def step(self, message: str, **kwargs):
        """Progreso de la integración temporal."""
        self._log('STEP', message, **kwargs)

    def event(self, message: str, **kwargs):
        """Eventos de capas y del canal."""
        self._log('EVENT', message, **kwargs)

    def sweep(self, message: str, **kwargs):
        self._log('SWEEP', message, **kwargs)

    def io(self, message: str, **kwargs):
        """Archivos escritos."""
        self._log('IO', message, **kwargs)

    def set_level(self, level: int):
        self.logger.setLevel(level)


def _settings_defaults():
    """LOG_LEVEL y LOG_COLORS de Settings; INFO con colores si el entorno es inválido."""
    try:
        from metastable.config import Settings
        settings = Settings()
        return logging.getLevelName(settings.LOG_LEVEL), settings.LOG_COLORS
    except Exception:
        return logging.INFO, True


def get_logger(name: str, **kwargs) -> SexyLogger:
    return SexyLogger(name, **kwargs)
