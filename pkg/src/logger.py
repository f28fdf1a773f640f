import json
import os
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from src.config import LOG_FILE


def log_decision(
    query: str,
    backend: str,
    selection: Optional[Dict[str, float]],
    success: bool,
    error_message: Optional[str] = None,
    latency_s: float = 0.0,
    response: Optional[str] = None,
    log_file: Optional[Path] = None,
) -> None:
    """Logs the operator query, the gate's selection and its status."""
    entry = {
        "timestamp": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
        "query": query,
        "backend": backend,
        "selection": selection,
        "success": success,
        "error_message": error_message,
        "latency_s": round(latency_s, 6),
        "response": response,
    }

    log_file = Path(log_file or LOG_FILE)
    logs = get_logs(log_file)
    logs.append(entry)

    try:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        with open(log_file, "w", encoding="utf-8") as f:
            json.dump(logs, f, indent=4)
    except Exception as e:
        print(f"❌ Failed to write gate log: {e}")


def get_logs(log_file: Optional[Path] = None) -> List[Dict]:
    """Retrieves the history of gate decisions."""
    log_file = log_file or LOG_FILE
    if not os.path.exists(log_file):
        return []

    try:
        with open(log_file, "r", encoding="utf-8") as f:
            return json.load(f)
    except (json.JSONDecodeError, ValueError):
        return []
    except Exception as e:
        print(f"❌ Failed to read gate log: {e}")
        return []


def clear_logs(log_file: Optional[Path] = None) -> None:
    """Clears all gate logs."""
    try:
        with open(log_file or LOG_FILE, "w", encoding="utf-8") as f:
            json.dump([], f, indent=4)
    except Exception as e:
        print(f"❌ Failed to clear gate log: {e}")
