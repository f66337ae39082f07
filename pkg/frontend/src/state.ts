// Client-side mirror of the server's game state. Transitions happen only in
// response to acknowledged API results, so the mirror can never run ahead.

import type { GameView, GuessResult } from "./api.js";

export const MAX_HINTS = 5;

export type Phase = "idle" | "guessing" | "labeling" | "done";

export interface ClientGameState {
  playerId: string | null;
  nickname: string | null;
  gameId: string | null;
  imageUrl: string | null;
  hintLevel: number;
  hintsLeft: number;
  options: string[];
  phase: Phase;
  resigned: boolean;
  lastCorrect: boolean | null;
  lastPoints: number | null;
  lastTrueClass: string | null;
}

export function initialState(): ClientGameState {
  return {
    playerId: null,
    nickname: null,
    gameId: null,
    imageUrl: null,
    hintLevel: 0,
    hintsLeft: MAX_HINTS,
    options: [],
    phase: "idle",
    resigned: false,
    lastCorrect: null,
    lastPoints: null,
    lastTrueClass: null,
  };
}

export function withSession(
  state: ClientGameState,
  playerId: string,
  nickname: string,
): ClientGameState {
  return { ...initialState(), playerId, nickname };
}

export function withGame(state: ClientGameState, view: GameView): ClientGameState {
  if (!state.playerId) throw new Error("no session");
  if (view.hint_level < 0 || view.hint_level > MAX_HINTS) {
    throw new Error(`server sent hint level ${view.hint_level}`);
  }
  const phase: Phase = view.state === "open" ? "guessing" : "labeling";
  return {
    ...state,
    gameId: view.game_id,
    imageUrl: view.image,
    hintLevel: view.hint_level,
    hintsLeft: view.hints_left,
    options: view.options,
    phase,
    resigned: view.state === "resigned",
    lastCorrect: null,
    lastPoints: null,
    lastTrueClass: null,
  };
}

export function withHint(state: ClientGameState, view: GameView): ClientGameState {
  if (state.phase !== "guessing" || state.gameId !== view.game_id) {
    throw new Error("hint outside an open game");
  }
  if (view.hint_level <= state.hintLevel) {
    throw new Error("hint level may only increase");
  }
  return {
    ...state,
    hintLevel: view.hint_level,
    hintsLeft: view.hints_left,
    imageUrl: view.image,
  };
}

export function withGuess(state: ClientGameState, result: GuessResult): ClientGameState {
  if (state.phase !== "guessing" || state.gameId !== result.game_id) {
    throw new Error("guess outside an open game");
  }
  return {
    ...state,
    phase: "labeling",
    lastCorrect: result.correct,
    lastPoints: result.points,
    lastTrueClass: result.true_class,
  };
}

export function withResign(state: ClientGameState): ClientGameState {
  if (state.phase !== "guessing") throw new Error("resign outside an open game");
  return { ...state, phase: "labeling", resigned: true, lastPoints: 0, lastCorrect: false };
}

export function withLabelsSubmitted(state: ClientGameState): ClientGameState {
  if (state.phase !== "labeling") throw new Error("labels outside the labeling phase");
  return { ...state, phase: "done" };
}

export function canRevealMore(state: ClientGameState): boolean {
  return state.phase === "guessing" && state.hintLevel < MAX_HINTS;
}

export function mustOfferResign(state: ClientGameState): boolean {
  return state.phase === "guessing" && state.hintLevel >= MAX_HINTS;
}

/** Validate label entries: 1 to 5 non-empty texts, each at most 64 chars. */
export function validLabels(texts: string[]): string[] {
  const cleaned = texts.map((t) => t.trim()).filter((t) => t.length > 0);
  if (cleaned.length < 1 || cleaned.length > 5) {
    throw new Error("enter between 1 and 5 labels");
  }
  for (const text of cleaned) {
    if (text.length > 64) throw new Error("labels are limited to 64 characters");
  }
  return cleaned;
}
