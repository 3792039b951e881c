from pathlib import Path
from typing import List, Union

from pyqme.errors import ConfigurationError
from .config import Scenario, parse_scenario

BUILTIN_DIR = Path(__file__).parent / "builtin"


class ScenarioFactory:
    supported_file_extensions = [".ini", ".cfg"]

    @classmethod
    def builtin_names(cls) -> List[str]:
        return sorted(p.stem for p in BUILTIN_DIR.glob("*.ini"))

    @classmethod
    def builtin_text(cls, name: str) -> str:
        path = BUILTIN_DIR / f"{name}.ini"
        if not path.is_file():
            raise ConfigurationError(
                f"Unknown scenario: {name}. Supported: {', '.join(cls.builtin_names())}"
            )
        return path.read_text()

    @classmethod
    def get_scenario(cls, name_or_path: Union[str, Path]) -> Scenario:
        """Built-in scenario by name, or a scenario file (which may name a built-in base)."""
        path = Path(name_or_path)
        if path.is_file():
            ext = path.suffix.lower()
            if ext not in cls.supported_file_extensions:
                raise ValueError(
                    f"Unsupported file type: {ext}. "
                    f"Supported: {', '.join(cls.supported_file_extensions)}"
                )
            return parse_scenario(path.read_text(), str(path), cls._resolve_base(path.parent))

        name = str(name_or_path)
        return parse_scenario(cls.builtin_text(name), name, cls._resolve_base(None))

    @classmethod
    def _resolve_base(cls, directory: Union[Path, None]):
        def resolve(base: str) -> str:
            # sibling files first, then built-ins
            if directory is not None:
                for ext in cls.supported_file_extensions:
                    candidate = directory / f"{base}{ext}"
                    if candidate.is_file():
                        return candidate.read_text()
            return cls.builtin_text(base)

        return resolve


get_scenario = ScenarioFactory.get_scenario
