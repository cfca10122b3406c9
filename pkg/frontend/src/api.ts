/** Client for the assistant's HTTP+SSE API. */

import { SseParser } from "./sse.js";
import type { TraceEvent } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

function headers(token?: string): Record<string, string> {
  const base: Record<string, string> = { "Content-Type": "application/json" };
  if (token) {
    base.Authorization = `Bearer ${token}`;
  }
  return base;
}

export async function createSession(baseUrl: string, token?: string): Promise<string> {
  let response: Response;
  try {
    response = await fetch(`${baseUrl}/v1/sessions`, { method: "POST", headers: headers(token) });
  } catch (error) {
    throw new ApiError(0, `service unreachable: ${String(error)}`);
  }
  if (response.status !== 201) {
    throw new ApiError(response.status, `session creation failed (${response.status})`);
  }
  const body = (await response.json()) as { session_id: string };
  return body.session_id;
}

/**
 * Post one message and stream its trace events; resolves when the stream
 * closes. Clarification replies go through the same call: the service routes
 * a pending session to the resume path.
 */
export async function streamMessage(
  baseUrl: string,
  sessionId: string,
  text: string,
  onEvent: (event: TraceEvent) => void,
  token?: string,
): Promise<void> {
  let response: Response;
  try {
    response = await fetch(`${baseUrl}/v1/sessions/${sessionId}/messages`, {
      method: "POST",
      headers: headers(token),
      body: JSON.stringify({ text }),
    });
  } catch (error) {
    throw new ApiError(0, `service unreachable: ${String(error)}`);
  }
  if (!response.ok || !response.body) {
    throw new ApiError(response.status, `message rejected (${response.status})`);
  }
  const reader = response.body.getReader();
  const decoder = new TextDecoder();
  const parser = new SseParser();
  for (;;) {
    const { done, value } = await reader.read();
    if (done) {
      break;
    }
    for (const message of parser.feed(decoder.decode(value, { stream: true }))) {
      onEvent(JSON.parse(message.data) as TraceEvent);
    }
  }
}
