/** Browser bootstrap: wire user input and the event stream into the fold. */

import { ApiError, createSession, streamMessage } from "./api.js";
import { renderConversation } from "./render.js";
import {
  bannerShown,
  foldEvent,
  initialState,
  sessionStarted,
  streamDropped,
  turnStarted,
  type ConversationState,
} from "./state.js";

const BASE_URL = (window as { PAPERDESK_BASE_URL?: string }).PAPERDESK_BASE_URL ?? "";
const TOKEN_KEY = "paperdesk_token";

let state: ConversationState = initialState();
let root: HTMLElement;

function update(next: ConversationState): void {
  state = next;
  root.innerHTML = renderConversation(state);
  const input = root.querySelector<HTMLInputElement>("#reply-input, #chat-input:not([disabled])");
  input?.focus();
}

async function boot(): Promise<void> {
  try {
    const sessionId = await createSession(BASE_URL, token());
    update(sessionStarted(state, sessionId));
  } catch (error) {
    if (error instanceof ApiError && error.status === 401) {
      const entered = window.prompt("API token required:");
      if (entered) {
        window.localStorage.setItem(TOKEN_KEY, entered);
        return boot();
      }
    }
    update(bannerShown(state, "Could not reach the assistant service."));
  }
}

function token(): string | undefined {
  return window.localStorage.getItem(TOKEN_KEY) ?? undefined;
}

async function send(text: string): Promise<void> {
  if (!state.sessionId || state.turnInFlight) {
    return;
  }
  update(turnStarted(state, text));
  try {
    await streamMessage(BASE_URL, state.sessionId, text, (event) => update(foldEvent(state, event)), token());
  } catch (error) {
    update(streamDropped(state, `Stream failed: ${String(error)}`));
  }
}

function onSubmit(event: Event): void {
  const form = event.target as HTMLFormElement;
  if (form.id !== "chat-form" && form.id !== "reply-form") {
    return;
  }
  event.preventDefault();
  const input = form.querySelector("input");
  const text = input?.value.trim();
  if (text) {
    void send(text);
  }
}

function onClick(event: Event): void {
  if ((event.target as HTMLElement).id === "retry-button") {
    void boot();
  }
}

export function main(): void {
  root = document.getElementById("app")!;
  root.addEventListener("submit", onSubmit);
  root.addEventListener("click", onClick);
  update(state);
  void boot();
}

main();
