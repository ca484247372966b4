"""
Banner ASCII art para el inicio de la CLI.
Se imprime en stderr para que stdout quede libre para JSON y datos de gráficos.
"""
import re
import sys

from metastable.utils.sexy_logger import Colors


def get_banner() -> str:
    """
    Retorna el banner ASCII art de la CLI.

    Returns:
        str: Banner formateado con colores ANSI
    """
    banner = f"""
{Colors.BRIGHT_CYAN}╔══════════════════════════════════════════════════════════════╗
║                                                              ║
║  {Colors.BRIGHT_MAGENTA}  ┌─────┐        ┌─────┐        ┌─────┐        ┌─────  {Colors.BRIGHT_CYAN}    ║
║  {Colors.BRIGHT_MAGENTA}  │     │        │     │        │     │        │       {Colors.BRIGHT_CYAN}    ║
║  {Colors.BRIGHT_MAGENTA} ─┘     └────────┘     └────────┘     └────────┘       {Colors.BRIGHT_CYAN}    ║
║                                                              ║
║  {Colors.BRIGHT_WHITE}  M E T A S T A B L E   ·   capas de Allen–Cahn 1-D     {Colors.BRIGHT_CYAN}  ║
║                                                              ║
╚══════════════════════════════════════════════════════════════╝{Colors.RESET}
"""
    return banner


def _visual_length(s: str) -> int:
    """Longitud visible de una cadena sin los códigos de escape ANSI."""
    return len(re.sub(r'\x1B\[[0-?]*[ -/]*[@-~]', '', s))


def print_banner():
    """Imprime el banner en stderr."""
    print(get_banner(), file=sys.stderr)


def print_run_info(command: str, config_hash: str = None, workers: int = 1):
    """
    Imprime un recuadro con el comando y el hash de configuración.

    Args:
        command: Subcomando en ejecución
        config_hash: Hash SHA-256 de la configuración, si aplica
        workers: Procesos del pool de barridos
    """
    width = 64
    lines = [f" 🧪 Comando: {Colors.BRIGHT_GREEN}{command}{Colors.RESET}"]
    if config_hash:
        lines.append(f" 🔑 Config: {Colors.BRIGHT_YELLOW}{config_hash[:16]}…{Colors.RESET}")
    lines.append(f" ⚙️ Workers: {Colors.BRIGHT_MAGENTA}{workers}{Colors.RESET}")

    parts = [f"{Colors.BRIGHT_CYAN} ╭{'─' * width}╮{Colors.RESET}"]
    for line in lines:
        padding = ' ' * max(width - _visual_length(line), 0)
        parts.append(f"{Colors.BRIGHT_CYAN} │{Colors.RESET}{line}{padding}{Colors.BRIGHT_CYAN}│{Colors.RESET}")
    parts.append(f"{Colors.BRIGHT_CYAN} ╰{'─' * width}╯{Colors.RESET}")
    print('\n'.join(parts), file=sys.stderr)


def print_separator():
    """Imprime un separador visual."""
    print(f"{Colors.DIM}    {'─' * 60}{Colors.RESET}", file=sys.stderr)
