from enum import Enum
from typing import Any, Callable, Dict, List

from metastable.utils.sexy_logger import get_logger

# Listeners reciben (nombre_evento, datos); se ejecutan en la misma secuencia del paso temporal
EventHandler = Callable[[str, Dict[str, Any]], None]


class EventBus:
    """
    Bus de eventos síncrono para desacoplar el integrador de sus observadores.

    Los listeners corren en orden de suscripción, sin reentrada; un listener que
    falla se registra en el log y no detiene al emisor.
    """

    def __init__(self):
        self._subscribers: Dict[str, List[EventHandler]] = {}
        self.logger = get_logger(__name__)

    def subscribe(self, event_name: str, handler: EventHandler):
        """Registra una función para escuchar un evento específico."""
        key = event_name.value if isinstance(event_name, Enum) else event_name
        self._subscribers.setdefault(key, []).append(handler)
        self.logger.debug(f"Listener registrado para evento: {key}")

    def emit(self, event_name: str, data: Dict[str, Any]):
        """Publica un evento a todos sus listeners."""
        key = event_name.value if isinstance(event_name, Enum) else event_name
        for handler in self._subscribers.get(key, []):
            try:
                handler(key, data)
            except Exception as e:
                self.logger.error(f"Error en EventBus manejando '{key}': {e}", exc_info=True)


class Events(str, Enum):
    ANNIHILATION = "annihilation"              # cambió el número de cruces por cero
    ENDS_EXIT = "ends_exit"                    # ℓ^h ≤ ε/ρ, el run termina
    SIDES_EXIT = "sides_exit"                  # salida del canal con margen positivo (anomalía)
    PROJECTION_FAILURE = "projection_failure"  # Newton no convergió, diagnósticos suspendidos
    BLOW_UP = "blow_up"                        # NaN/Inf en el estado
    DOMAIN_EXIT = "domain_exit"                # trayectoria reducida sale de Ω_ρ
    COERCIVITY_LOST = "coercivity_lost"        # Λ̂ ≤ 0
    SAMPLE_RECORDED = "sample_recorded"        # nuevo registro en la serie
