"""Internationalization (i18n) support using JSON translation files."""

import json
import locale
import logging
from pathlib import Path
from typing import Dict, Optional

logger = logging.getLogger(__name__)

DEFAULT_LANGUAGE = "en-US"

# Singleton translator instance
_translator: Optional["Translator"] = None


class Translator:
    """Translator class for loading and managing message catalogs."""

    def __init__(self, language: Optional[str] = None):
        """
        Initialize translator.

        Args:
            language: Language code (e.g., 'ja-JP', 'en-US').
                     If None, auto-detect from system locale.
        """
        self.locales_dir = Path(__file__).parent.parent / "locales"
        self.translations: Dict[str, str] = {}
        self.current_language = language or self._detect_system_language()
        self._load_translations()

    def _detect_system_language(self) -> str:
        try:
            sys_locale = locale.getlocale()[0]
            if sys_locale:
                if sys_locale.startswith("ja") or "Japanese" in sys_locale:
                    return "ja-JP"
                if sys_locale.startswith("en") or "English" in sys_locale:
                    return "en-US"
        except ValueError:
            pass
        return DEFAULT_LANGUAGE

    def _load_translations(self):
        lang_file = self.locales_dir / f"{self.current_language}.json"

        if not lang_file.exists():
            logger.debug("no catalog for %s, falling back to %s", self.current_language, DEFAULT_LANGUAGE)
            self.current_language = DEFAULT_LANGUAGE
            lang_file = self.locales_dir / f"{DEFAULT_LANGUAGE}.json"

        try:
            with open(lang_file, "r", encoding="utf-8") as f:
                self.translations = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("failed to load translations from %s: %s", lang_file, e)
            self.translations = {}

    def set_language(self, language: str):
        self.current_language = language
        self._load_translations()

    def translate(self, key: str, *args, **kwargs) -> str:
        """
        Translate a key to the current language.

        Unknown keys are returned unchanged; formatting errors leave the text unformatted.
        """
        text = self.translations.get(key, key)
        if args or kwargs:
            try:
                return text.format(*args, **kwargs)
            except (KeyError, IndexError, ValueError):
                return text
        return text

    def get_available_languages(self) -> Dict[str, str]:
        """Language code to the language's own name."""
        languages = {}
        for lang_file in sorted(self.locales_dir.glob("*.json")):
            try:
                with open(lang_file, "r", encoding="utf-8") as f:
                    languages[lang_file.stem] = json.load(f).get("language_name", lang_file.stem)
            except (OSError, json.JSONDecodeError):
                languages[lang_file.stem] = lang_file.stem
        return languages


def init_translator(language: Optional[str] = None) -> Translator:
    global _translator
    _translator = Translator(language)
    return _translator


def get_translator() -> Translator:
    global _translator
    if _translator is None:
        _translator = Translator()
    return _translator


def tr(key: str, *args, **kwargs) -> str:
    """Translate a key (convenience function)."""
    return get_translator().translate(key, *args, **kwargs)


def set_language(language: str):
    get_translator().set_language(language)
