from rich.theme import Theme

THEMES = {
    "lab": Theme({
        "primary": "bold cyan",
        "accent": "bright_blue",
        "header": "bold white on blue",
        "success": "bold green",
        "warning": "bold yellow",
        "error": "bold red",
        "metric": "bright_cyan",
        "muted": "dim",
    }),
    "mono": Theme({
        "primary": "bold",
        "accent": "underline",
        "header": "bold reverse",
        "success": "bold",
        "warning": "bold",
        "error": "bold",
        "metric": "none",
        "muted": "dim",
    }),
}

BANNERS = {
    "lab": r"""
  _       __     ____  __ ______
 | |  ___ \ \   / /  \/  | ____|
 | | / _ \ \ \ / /| |\/| |  _|
 | || (_) | \ V / | |  | | |___
 |_| \___/   \_/  |_|  |_|_____|
""",
    "mono": "LoVME: loss variance over thinned networks",
}


def get_theme(theme_name: str) -> Theme:
    return THEMES.get(theme_name, THEMES["lab"])


def get_banner(theme_name: str) -> str:
    return BANNERS.get(theme_name, BANNERS["lab"])
