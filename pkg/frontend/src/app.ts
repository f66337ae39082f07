// DOM wiring for the single-page game client. Every transition waits for
// the server's acknowledgment; a reload resumes the open game from the
// server. Label entry is free text only: no suggestion lists, no
// autocomplete, so players describe what they actually saw.

import { ApiError, DeepRevealApi, assertCompositeUrl } from "./api.js";
import {
  ClientGameState,
  canRevealMore,
  initialState,
  mustOfferResign,
  validLabels,
  withGame,
  withGuess,
  withHint,
  withLabelsSubmitted,
  withResign,
  withSession,
} from "./state.js";

const SESSION_KEY = "deep-reveal-session";
const LABEL_SLOTS = 5;

interface StoredSession {
  playerId: string;
  nickname: string;
}

export interface AppHandle {
  state(): ClientGameState;
  boot(): Promise<void>;
  root: HTMLElement;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function createApp(
  root: HTMLElement,
  api: DeepRevealApi,
  storage: Pick<Storage, "getItem" | "setItem" | "removeItem">,
): AppHandle {
  let state = initialState();

  root.innerHTML = "";
  const banner = el("div", "banner hidden");
  const sessionPanel = el("div", "panel session-panel");
  const gamePanel = el("div", "panel game-panel hidden");
  const labelPanel = el("div", "panel label-panel hidden");
  const donePanel = el("div", "panel done-panel hidden");
  const toast = el("div", "toast hidden");
  const boardPanel = el("div", "panel board-panel");
  root.append(banner, sessionPanel, gamePanel, labelPanel, donePanel, toast, boardPanel);

  // --- session panel ------------------------------------------------------
  const nicknameInput = el("input", "nickname-input");
  nicknameInput.placeholder = "nickname";
  nicknameInput.maxLength = 32;
  nicknameInput.autocomplete = "off";
  const startButton = el("button", "start-button", "Play");
  sessionPanel.append(el("h1", "", "Deep Reveal"), nicknameInput, startButton);

  // --- game panel ---------------------------------------------------------
  const image = el("img", "masked-image");
  image.alt = "masked image";
  const levelBadge = el("div", "level-badge");
  const revealButton = el("button", "reveal-button", "Reveal more");
  const resignButton = el("button", "resign-button hidden", "Resign");
  const optionsBox = el("div", "options");
  gamePanel.append(image, levelBadge, revealButton, resignButton, optionsBox);

  // --- label panel --------------------------------------------------------
  const labelHeading = el("h2", "", "Which features helped you decide?");
  const labelInputs: HTMLInputElement[] = [];
  const labelForm = el("form", "label-form");
  for (let i = 0; i < LABEL_SLOTS; i++) {
    const input = el("input", "label-input");
    input.placeholder = i === 0 ? "feature (required)" : "feature (optional)";
    input.autocomplete = "off";
    input.maxLength = 64;
    labelInputs.push(input);
    labelForm.append(input);
  }
  const labelSubmit = el("button", "label-submit", "Submit labels");
  labelSubmit.type = "submit";
  labelForm.append(labelSubmit);
  labelPanel.append(labelHeading, labelForm);

  // --- done panel ---------------------------------------------------------
  const doneMessage = el("div", "done-message");
  const nextButton = el("button", "next-button", "Next image");
  donePanel.append(doneMessage, nextButton);

  // --- leaderboard --------------------------------------------------------
  const boardList = el("ol", "board-list");
  boardPanel.append(el("h2", "", "Leaderboard"), boardList);

  function show(panel: HTMLElement, visible: boolean) {
    panel.classList.toggle("hidden", !visible);
  }

  function showToast(text: string) {
    toast.textContent = text;
    show(toast, true);
  }

  function showError(message: string, retry: () => Promise<void>) {
    banner.innerHTML = "";
    banner.append(el("span", "", message));
    const retryButton = el("button", "retry-button", "Retry");
    retryButton.addEventListener("click", () => {
      show(banner, false);
      void guard(retry)();
    });
    banner.append(retryButton);
    show(banner, true);
  }

  function guard(action: () => Promise<void>): () => Promise<void> {
    return async () => {
      try {
        await action();
        show(banner, false);
      } catch (err) {
        const message = err instanceof ApiError ? err.message : `request failed: ${err}`;
        showError(message, action);
      }
    };
  }

  function render() {
    show(sessionPanel, state.playerId === null);
    show(gamePanel, state.phase === "guessing");
    show(labelPanel, state.phase === "labeling");
    show(donePanel, state.phase === "done" || (state.playerId !== null && state.phase === "idle"));
    if (state.phase === "guessing" && state.imageUrl) {
      image.src = assertCompositeUrl(state.imageUrl);
      levelBadge.textContent = `reveal level ${state.hintLevel} / 5`;
      revealButton.textContent = `Reveal more (${state.hintsLeft} left)`;
      revealButton.disabled = !canRevealMore(state);
      show(revealButton, canRevealMore(state));
      show(resignButton, mustOfferResign(state));
      optionsBox.innerHTML = "";
      state.options.forEach((option, index) => {
        const button = el("button", "option-button", `${index + 1}. ${option}`);
        button.dataset.className = option;
        button.addEventListener("click", () => void guardedGuess(option)());
        optionsBox.append(button);
      });
    }
    if (state.phase === "labeling") {
      const outcome = state.resigned
        ? "Resigned."
        : state.lastCorrect
          ? `Correct! +${state.lastPoints} points`
          : `Not quite; it was "${state.lastTrueClass}".`;
      labelHeading.textContent = `${outcome} Which features did you see?`;
      labelInputs.forEach((input) => (input.value = ""));
    }
    if (state.phase === "done") {
      doneMessage.textContent = "Labels saved. Thanks!";
    }
  }

  async function refreshBoard() {
    const entries = await api.leaderboard(10);
    boardList.innerHTML = "";
    for (const entry of entries) {
      boardList.append(el("li", "board-entry", `${entry.nickname}: ${entry.score}`));
    }
  }

  const startSession = guard(async () => {
    const nickname = nicknameInput.value.trim();
    const session = await api.createSession(nickname);
    state = withSession(state, session.player_id, session.nickname);
    storage.setItem(
      SESSION_KEY,
      JSON.stringify({ playerId: session.player_id, nickname: session.nickname }),
    );
    await startGame();
    render();
  });

  async function startGame() {
    if (!state.playerId) return;
    const view = await api.nextGame(state.playerId);
    state = withGame(state, view);
    render();
  }

  const guardedStartGame = guard(async () => {
    await startGame();
  });

  const revealMore = guard(async () => {
    if (!state.gameId) return;
    const view = await api.requestHint(state.gameId);
    state = withHint(state, view);
    render();
  });

  function guardedGuess(option: string) {
    return guard(async () => {
      if (!state.gameId) return;
      const result = await api.submitGuess(state.gameId, option);
      state = withGuess(state, result);
      showToast(result.correct ? `+${result.points}` : "+0");
      await refreshBoard();
      render();
    });
  }

  const doResign = guard(async () => {
    if (!state.gameId) return;
    await api.resign(state.gameId);
    state = withResign(state);
    render();
  });

  const sendLabels = guard(async () => {
    if (!state.gameId) return;
    const labels = validLabels(labelInputs.map((input) => input.value));
    await api.submitLabels(state.gameId, labels);
    state = withLabelsSubmitted(state);
    await refreshBoard();
    render();
  });

  startButton.addEventListener("click", () => void startSession());
  nicknameInput.addEventListener("keydown", (event) => {
    if (event.key === "Enter") void startSession();
  });
  revealButton.addEventListener("click", () => void revealMore());
  resignButton.addEventListener("click", () => void doResign());
  nextButton.addEventListener("click", () => void guardedStartGame());
  labelForm.addEventListener("submit", (event) => {
    event.preventDefault();
    void sendLabels();
  });
  // keyboard shortcuts: digits pick a class option while guessing
  root.ownerDocument.addEventListener("keydown", (event) => {
    if (state.phase !== "guessing") return;
    if (event.target === nicknameInput || labelInputs.includes(event.target as HTMLInputElement))
      return;
    const index = Number.parseInt(event.key, 10) - 1;
    if (Number.isInteger(index) && index >= 0 && index < state.options.length) {
      void guardedGuess(state.options[index])();
    }
  });

  async function boot() {
    const stored = storage.getItem(SESSION_KEY);
    if (stored) {
      try {
        const session = JSON.parse(stored) as StoredSession;
        state = withSession(state, session.playerId, session.nickname);
        const open = await api.currentGame(session.playerId);
        if (open) {
          state = withGame(state, open);
        }
      } catch {
        storage.removeItem(SESSION_KEY);
        state = initialState();
      }
    }
    try {
      await refreshBoard();
    } catch {
      // leaderboard is non-critical at boot
    }
    render();
  }

  render();
  return { state: () => state, boot, root };
}
