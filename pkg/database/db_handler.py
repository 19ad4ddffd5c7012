import json
import logging
import os
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

logger = logging.getLogger(__name__)


class DatabaseHandler:
    """
    Handles record storage for benchmark runs.

    Collections are lists of flat JSON documents kept in memory and
    persisted as one JSON Lines file per collection under `root`.
    """

    COLLECTIONS = ("instances", "plans", "episodes", "failures")

    def __init__(self, root: Optional[str] = None):
        """Initialize the store, loading any collection files already under `root`."""
        load_dotenv()
        self.root = root or os.environ.get("RAILPLAN_DATA_DIR")
        self.collections: Dict[str, List[Dict[str, Any]]] = {name: [] for name in self.COLLECTIONS}
        if self.root:
            self.connect()

    def connect(self):
        """Load every `<collection>.jsonl` file found under the store root."""
        os.makedirs(self.root, exist_ok=True)
        for name in self.collections:
            path = self._path(name)
            if not os.path.exists(path):
                continue
            with open(path, "r", encoding="utf-8") as f:
                self.collections[name] = [json.loads(line) for line in f if line.strip()]
            logger.debug("Loaded %d %s records", len(self.collections[name]), name)

    def _path(self, collection_name: str) -> str:
        return os.path.join(self.root, f"{collection_name}.jsonl")

    def save(self, collection_name: Optional[str] = None):
        """Write one collection (or all of them) back to disk."""
        if not self.root:
            return
        names = [collection_name] if collection_name else list(self.collections)
        for name in names:
            with open(self._path(name), "w", encoding="utf-8") as f:
                for document in self.collections.get(name, []):
                    f.write(json.dumps(document, sort_keys=True) + "\n")

    def drop_collection(self, collection_name):
        """Remove every document of a collection."""
        self.collections[collection_name] = []

    def get_collection(self, collection_name):
        """Get a collection by name."""
        if collection_name in self.collections:
            return self.collections[collection_name]
        return []

    @staticmethod
    def _matches(item, query):
        return all(key in item and item[key] == value for key, value in query.items())

    def find_one(self, collection_name, query):
        """Find a single document in a collection."""
        for item in self.get_collection(collection_name):
            if self._matches(item, query):
                return item
        return None

    def find(self, collection_name, query=None):
        """Find documents in a collection."""
        collection = self.get_collection(collection_name)
        if query is None:
            return list(collection)
        return [item for item in collection if self._matches(item, query)]

    def insert_one(self, collection_name, document):
        """Insert a document into a collection, creating the collection if needed."""
        self.collections.setdefault(collection_name, []).append(document)
        return {"inserted_id": document.get("id")}

    def update_one(self, collection_name, query, update):
        """Update a document in a collection."""
        if collection_name not in self.collections:
            return None

        for item in self.collections[collection_name]:
            if self._matches(item, query):
                for update_key, update_value in update.get("$set", {}).items():
                    item[update_key] = update_value
                return {"modified_count": 1}

        return {"modified_count": 0}

    def delete_one(self, collection_name, query):
        """Delete a document from a collection."""
        if collection_name not in self.collections:
            return None

        for i, item in enumerate(self.collections[collection_name]):
            if self._matches(item, query):
                del self.collections[collection_name][i]
                return {"deleted_count": 1}

        return {"deleted_count": 0}
