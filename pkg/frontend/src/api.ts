// Typed client for the game service HTTP API. Every call returns the
// server's view of the state; the UI never advances optimistically.

export interface SessionView {
  player_id: string;
  nickname: string;
  score: number;
  trusted: boolean;
}

export interface GameView {
  game_id: string;
  options: string[];
  hint_level: number;
  hints_left: number;
  state: "open" | "guessed" | "resigned";
  image: string;
}

export interface GuessResult {
  game_id: string;
  correct: boolean;
  points: number;
  true_class: string;
  state: string;
}

export interface LeaderboardEntry {
  nickname: string;
  score: number;
  games_played: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

const COMPOSITE_PREFIX = "/api/image/";

/** The only image resources the client may reference are pre-composited
 * masked renders served under /api/image/. */
export function assertCompositeUrl(url: string): string {
  const path = url.startsWith("http") ? new URL(url).pathname : url;
  if (!path.startsWith(COMPOSITE_PREFIX)) {
    throw new Error(`refusing non-composite image resource: ${url}`);
  }
  return url;
}

export class DeepRevealApi {
  constructor(
    private fetchFn: FetchLike,
    private baseUrl: string = "",
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    let body: unknown = null;
    try {
      body = await response.json();
    } catch {
      // non-JSON error body; fall through with status text
    }
    if (!response.ok) {
      const detail =
        body && typeof body === "object" && "detail" in body
          ? String((body as { detail: unknown }).detail)
          : response.statusText;
      throw new ApiError(response.status, detail);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  createSession(nickname: string): Promise<SessionView> {
    return this.post("/api/session", { nickname });
  }

  async nextGame(player: string): Promise<GameView> {
    const view = await this.request<GameView>(
      `/api/game/next?player=${encodeURIComponent(player)}`,
    );
    assertCompositeUrl(view.image);
    return view;
  }

  async currentGame(player: string): Promise<GameView | null> {
    const view = await this.request<GameView | { game_id: null }>(
      `/api/game/current?player=${encodeURIComponent(player)}`,
    );
    if (!view.game_id) return null;
    assertCompositeUrl((view as GameView).image);
    return view as GameView;
  }

  async requestHint(gameId: string): Promise<GameView> {
    const view = await this.post<GameView>(`/api/game/${gameId}/hint`, {});
    assertCompositeUrl(view.image);
    return view;
  }

  submitGuess(gameId: string, className: string): Promise<GuessResult> {
    return this.post(`/api/game/${gameId}/guess`, { class_name: className });
  }

  resign(gameId: string): Promise<{ game_id: string; state: string }> {
    return this.post(`/api/game/${gameId}/resign`, {});
  }

  submitLabels(gameId: string, labels: string[]): Promise<{ stored: number }> {
    return this.post(`/api/game/${gameId}/labels`, { labels });
  }

  leaderboard(limit = 10): Promise<LeaderboardEntry[]> {
    return this.request(`/api/leaderboard?limit=${limit}`);
  }
}
