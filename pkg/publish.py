"""Upload experiment outputs to a GitHub repository (update or create each file)."""
from __future__ import annotations

import os
from datetime import datetime, timezone

from github import Auth, Github, GithubException

RESULTS_PREFIX = "results"


def load_token() -> str:
    token = os.getenv("GITHUB_TOKEN")
    if not token:
        raise ValueError(
            "GITHUB_TOKEN environment variable not set.\n"
            "Run: export GITHUB_TOKEN=your_token_here"
        )
    return token


def _read(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def publish_files(repo_name: str, paths: list[str], prefix: str = RESULTS_PREFIX,
                  token: str | None = None) -> list[str]:
    """Push each local file to `prefix/<basename>` in `repo_name`; returns the remote paths."""
    token = token or load_token()
    g = Github(auth=Auth.Token(token))
    repo = g.get_repo(repo_name)
    timestamp = datetime.now(timezone.utc).strftime('%Y-%m-%d %H:%M UTC')

    published = []
    for path in paths:
        github_path = f"{prefix}/{os.path.basename(path)}"
        content = _read(path)
        commit_message = f"Update {os.path.basename(path)} - {timestamp}"
        try:
            existing = repo.get_contents(github_path)
            repo.update_file(github_path, commit_message, content, existing.sha)
            print(f"  ✓ Updated {github_path}")
        except GithubException as e:
            if e.status != 404:
                print(f"  ❌ Error publishing {github_path}: {e}")
                raise
            repo.create_file(github_path, commit_message, content)
            print(f"  ✓ Created {github_path}")
        published.append(github_path)
    return published
